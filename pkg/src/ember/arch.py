"""Model architectures: the three evaluated networks plus small test models.

Conv layers are stride 1 with no padding and each is followed by ReLU and a
stride-equals-window max pool.  Three places needed a choice to make the
published layer shapes compose:

* MNIST: 28x28 -> conv5 -> pool2 -> conv3 -> pool2 gives 16x5x5 = 400.
* HAR: the 1x12 conv has a single-row feature map, so its pool is 1x2;
  8 x (231 - 11) / 2 = 880 fixes the input length at 231.
* GTSRB: conv2 takes 4 input channels while conv1 emits 16, so the pool
  after conv1 is a channel max-pool (window 4x1x1).  A 3x12x20 input then
  gives 16x4x8 = 512 after conv2 and a 2x2 pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ember.model import LayerKind, LayerSpec, ModelSpec, QTensor, quantize_values


@dataclass
class LayerTemplate:
    kind: LayerKind
    dims: tuple
    name: str = ""
    patterned: bool = False
    # fraction of weights kept in low-energy mode; None for exempt layers
    pattern_target: Optional[float] = None
    # (block_rows, block_cols, entries); None lets the library choose
    pattern_geometry: Optional[tuple] = None


@dataclass
class Architecture:
    name: str
    input_shape: tuple
    n_classes: int
    layers: list = field(default_factory=list)

    def mac_layers(self):
        return [(i, t) for i, t in enumerate(self.layers) if t.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED)]


def _conv(name, dims, target=None, geometry=None):
    return LayerTemplate(LayerKind.CONV2D, dims, name, target is not None, target, geometry)


def _fc(name, dims, target=None, geometry=None):
    return LayerTemplate(LayerKind.FULLY_CONNECTED, dims, name, target is not None, target, geometry)


def _relu(name):
    return LayerTemplate(LayerKind.RELU, (), name)


def _pool(name, window):
    return LayerTemplate(LayerKind.MAXPOOL, window, name)


def table1_mnist():
    return Architecture("table1-mnist", (1, 28, 28), 10, [
        _conv("conv1", (8, 1, 5, 5), 0.588),
        _relu("relu1"),
        _pool("pool1", (1, 2, 2)),
        _conv("conv2", (16, 8, 3, 3), 0.333),
        _relu("relu2"),
        _pool("pool2", (1, 2, 2)),
        _fc("fc1", (100, 400), 0.4444),
        _relu("relu3"),
        _fc("fc2", (10, 100)),
    ])


def table1_har():
    return Architecture("table1-har", (1, 1, 231), 6, [
        _conv("conv1", (8, 1, 1, 12)),
        _relu("relu1"),
        _pool("pool1", (1, 1, 2)),
        _fc("fc1", (64, 880), 0.243),
        _relu("relu2"),
        _fc("fc2", (6, 64)),
    ])


def table1_gtsrb():
    return Architecture("table1-gtsrb", (3, 12, 20), 43, [
        _conv("conv1", (16, 3, 3, 3)),
        _relu("relu1"),
        _pool("chanpool", (4, 1, 1)),
        _conv("conv2", (16, 4, 3, 3), 0.4444),
        _relu("relu2"),
        _pool("pool2", (1, 2, 2)),
        _fc("fc1", (100, 512), 0.5555),
        _relu("relu3"),
        _fc("fc2", (43, 100)),
    ])


def reduced_mnist():
    """Same layer sequence as the MNIST network at a size the simulator can
    sweep thousands of times."""
    return Architecture("reduced-mnist", (1, 10, 10), 10, [
        _conv("conv1", (2, 1, 3, 3), 0.4444),
        _relu("relu1"),
        _pool("pool1", (1, 2, 2)),
        _conv("conv2", (4, 2, 3, 3), 0.333),
        _relu("relu2"),
        _pool("pool2", (1, 2, 2)),
        _fc("fc1", (6, 4), 0.4444),
        _relu("relu3"),
        _fc("fc2", (10, 6)),
    ])


def toy_two_mac():
    """One output computed from two multiply-accumulates."""
    return Architecture("toy-2mac", (2,), 1, [_fc("fc", (1, 2))])


def toy_tiny():
    return Architecture("toy-tiny", (1, 3, 3), 3, [
        _conv("conv", (2, 1, 2, 2), 0.5, (2, 2, 2)),
        _relu("relu"),
        _fc("fc", (3, 8)),
    ])


ARCHITECTURES = {
    "table1-mnist": table1_mnist,
    "table1-har": table1_har,
    "table1-gtsrb": table1_gtsrb,
    "reduced-mnist": reduced_mnist,
    "toy-2mac": toy_two_mac,
    "toy-tiny": toy_tiny,
}

DATASET_ARCH = {"mnist": "table1-mnist", "har": "table1-har", "gtsrb": "table1-gtsrb"}


def get_architecture(name: str) -> Architecture:
    try:
        return ARCHITECTURES[name]()
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None


def random_model(arch, seed: int = 0, weight_range: float = 0.5) -> ModelSpec:
    """A quantized model with seeded random weights and biases.

    Output scales are picked so activations stay comfortably inside Q15 for
    inputs in [0, 1); used wherever behaviour, not accuracy, is under test.
    """
    if isinstance(arch, str):
        arch = get_architecture(arch)
    rng = np.random.default_rng(seed)
    layers = []
    for i, t in enumerate(arch.layers):
        if t.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            n = int(np.prod(t.dims))
            fan_in = n // t.dims[0]
            w = rng.uniform(-weight_range, weight_range, size=t.dims)
            weights = QTensor(t.dims, quantize_values(w, 0), 0)
            bias = rng.integers(-(1 << 24), 1 << 24, size=t.dims[0])
            out_scale = max(0, int(np.ceil(np.log2(max(1.0, weight_range * fan_in * 0.5)))))
            layers.append(LayerSpec(
                t.kind, t.dims, i, weights, bias, None, out_scale, t.patterned, t.name,
                t.pattern_target, t.pattern_geometry,
            ))
        else:
            layers.append(LayerSpec(t.kind, t.dims, i, name=t.name))
    # conv/fc out scales feed the next MAC layer's input scale; biases are Q30 at
    # (input scale + weight scale), which random ints already satisfy loosely
    return ModelSpec(layers, arch.input_shape, arch.name, 0).validate()


def pattern_targets(arch: Architecture) -> dict:
    return {i: t.pattern_target for i, t in enumerate(arch.layers) if t.patterned}


def pattern_geometries(arch: Architecture) -> dict:
    return {i: t.pattern_geometry for i, t in enumerate(arch.layers) if t.patterned and t.pattern_geometry}
