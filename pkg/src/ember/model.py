"""Q15 tensors, layer descriptions, and the reference (continuous-power) kernels.

Every kernel walks its loop nest in one fixed order:

    conv:  out_ch -> out_row -> out_col -> in_ch -> k_row -> k_col
    fc:    out_feature -> in_feature
    pool:  out_ch -> out_row -> out_col -> (window, any order)

The order is part of the public contract: progress records produced by the
intermittent runtime index into exactly these loops, and 32-bit saturating
accumulation makes the result order-dependent in principle.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ember.errors import ConfigurationError, DimensionError

Q15_MIN, Q15_MAX = -(1 << 15), (1 << 15) - 1
ACC_MIN, ACC_MAX = -(1 << 31), (1 << 31) - 1
FRAC_BITS = 15


class InferenceMode(enum.Enum):
    FULL = "full"
    LOW_ENERGY = "low_energy"


class LayerKind(enum.IntEnum):
    CONV2D = 1
    FULLY_CONNECTED = 2
    MAXPOOL = 3
    RELU = 4


MAC_KINDS = (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED)


# --------------------------------------------------------------------------
# fixed-point helpers


def round_shift(acc: int, shift: int) -> int:
    """Scale ``acc`` by 2**-shift, rounding half away from zero."""
    if shift <= 0:
        return acc << -shift
    half = 1 << (shift - 1)
    if acc >= 0:
        return (acc + half) >> shift
    return -((-acc + half) >> shift)


def round_shift_array(acc: np.ndarray, shift: int) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    if shift <= 0:
        return acc << -shift
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(acc) + half) >> shift
    return np.where(acc < 0, -mag, mag)


def saturate16(v):
    return np.clip(v, Q15_MIN, Q15_MAX)


def sat16(v: int) -> int:
    return Q15_MAX if v > Q15_MAX else (Q15_MIN if v < Q15_MIN else v)


def sat32(v: int) -> int:
    return ACC_MAX if v > ACC_MAX else (ACC_MIN if v < ACC_MIN else v)


def requant_shift(in_scale: int, weight_scale: int, out_scale: int) -> int:
    """Right shift taking a Q30 product accumulator to Q15 at ``out_scale``."""
    return FRAC_BITS + out_scale - in_scale - weight_scale


def quantize_values(values, scale: int) -> np.ndarray:
    """Float values to Q15 integers at exponent ``scale`` (round half away)."""
    scaled = np.asarray(values, dtype=np.float64) * float(2 ** (FRAC_BITS - scale))
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return saturate16(q).astype(np.int16)


@dataclass
class QTensor:
    """Flat Q15 payload plus shape; real value = data * 2**(scale - 15)."""

    shape: tuple
    data: np.ndarray
    scale: int = 0

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        data = np.asarray(self.data)
        if data.size and (data.min() < Q15_MIN or data.max() > Q15_MAX):
            raise DimensionError("Q15 payload outside the 16-bit signed range")
        self.data = data.astype(np.int16).reshape(-1)
        if self.data.size != int(np.prod(self.shape, dtype=np.int64)):
            raise DimensionError(
                f"payload has {self.data.size} values, shape {self.shape} needs "
                f"{int(np.prod(self.shape))}"
            )
        self.scale = int(self.scale)

    @classmethod
    def from_float(cls, values, scale: int = 0) -> "QTensor":
        values = np.asarray(values, dtype=np.float64)
        return cls(values.shape, quantize_values(values, scale), scale)

    def to_float(self) -> np.ndarray:
        return self.data.astype(np.float64).reshape(self.shape) * 2.0 ** (self.scale - FRAC_BITS)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.scale == other.scale
            and np.array_equal(self.data, other.data)
        )


@dataclass
class LayerSpec:
    """One layer of a deployable model.

    ``dims`` by kind:
      CONV2D          (out_ch, in_ch, kh, kw)
      FULLY_CONNECTED (out_features, in_features)
      MAXPOOL         (window_c, window_h, window_w); stride equals window
      RELU            ()

    ``bias`` is int32 in accumulator units, i.e. Q30 at in_scale + weight scale.
    ``patterned`` marks layers that take part in low-energy mode; ``mask``
    (same shape as the weights) is attached once a pattern library exists.
    """

    kind: LayerKind
    dims: tuple
    id: int = 0
    weights: Optional[QTensor] = None
    bias: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    out_scale: int = 0
    patterned: bool = False
    name: str = ""
    # low-energy design targets, consumed when building a pattern library
    pattern_target: Optional[float] = None
    pattern_geometry: Optional[tuple] = None

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        self.dims = tuple(int(d) for d in self.dims)
        expected = {LayerKind.CONV2D: 4, LayerKind.FULLY_CONNECTED: 2, LayerKind.MAXPOOL: 3, LayerKind.RELU: 0}
        if len(self.dims) != expected[self.kind]:
            raise DimensionError(f"{self.kind.name} takes {expected[self.kind]} dims, got {self.dims}")
        if self.kind in MAC_KINDS:
            if self.weights is not None and self.weights.size != self.weight_count:
                raise DimensionError(
                    f"layer {self.id}: {self.weights.size} weights, dims {self.dims} "
                    f"need {self.weight_count}"
                )
            if self.bias is not None:
                self.bias = np.asarray(self.bias, dtype=np.int64).astype(np.int32)
                if self.bias.size != self.dims[0]:
                    raise DimensionError(f"layer {self.id}: bias length {self.bias.size} != {self.dims[0]}")
            if self.mask is not None:
                self.mask = np.asarray(self.mask, dtype=bool).reshape(self.weight_shape)
        elif self.weights is not None:
            raise DimensionError(f"{self.kind.name} layers carry no weights")

    @property
    def weight_shape(self) -> tuple:
        if self.kind == LayerKind.CONV2D or self.kind == LayerKind.FULLY_CONNECTED:
            return self.dims
        return ()

    @property
    def weight_count(self) -> int:
        if self.kind in MAC_KINDS:
            return int(np.prod(self.dims))
        return 0

    @property
    def weight_scale(self) -> int:
        return self.weights.scale if self.weights is not None else 0

    def bias_values(self) -> np.ndarray:
        if self.bias is None:
            return np.zeros(self.dims[0], dtype=np.int64)
        return self.bias.astype(np.int64)

    def effective_mask(self, mode: InferenceMode) -> Optional[np.ndarray]:
        """Mask to apply under ``mode`` (None means every weight is live)."""
        if mode != InferenceMode.LOW_ENERGY or not self.patterned:
            return None
        if self.mask is None:
            raise ConfigurationError(
                f"layer {self.id} is patterned but has no mask; build a pattern library first"
            )
        return self.mask

    def output_shape(self, input_shape: Sequence[int]) -> tuple:
        input_shape = tuple(input_shape)
        if self.kind == LayerKind.CONV2D:
            oc, ic, kh, kw = self.dims
            if len(input_shape) != 3 or input_shape[0] != ic:
                raise DimensionError(f"layer {self.id}: conv expects {ic} input channels, got {input_shape}")
            _, h, w = input_shape
            if h < kh or w < kw:
                raise DimensionError(f"layer {self.id}: input {input_shape} smaller than kernel {kh}x{kw}")
            return (oc, h - kh + 1, w - kw + 1)
        if self.kind == LayerKind.FULLY_CONNECTED:
            n_in = int(np.prod(input_shape))
            if n_in != self.dims[1]:
                raise DimensionError(f"layer {self.id}: fc expects {self.dims[1]} inputs, got {n_in}")
            return (self.dims[0],)
        if self.kind == LayerKind.MAXPOOL:
            if len(input_shape) != 3:
                raise DimensionError(f"layer {self.id}: pooling needs a CHW input, got {input_shape}")
            wc, wh, ww = self.dims
            c, h, w = input_shape
            out = (c // wc, h // wh, w // ww)
            if min(out) < 1:
                raise DimensionError(f"layer {self.id}: window {self.dims} larger than input {input_shape}")
            return out
        return input_shape


@dataclass
class ModelSpec:
    layers: list
    input_shape: tuple
    name: str = "model"
    input_scale: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def validate(self) -> "ModelSpec":
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise ConfigurationError(f"layer ids must run 0..n-1; position {i} has id {layer.id}")
        self.activation_shapes()
        return self

    def activation_shapes(self) -> list:
        """Shapes of the input followed by every layer's output."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def activation_scales(self) -> list:
        scales = [self.input_scale]
        for layer in self.layers:
            scales.append(layer.out_scale if layer.kind in MAC_KINDS else scales[-1])
        return scales

    @property
    def output_shape(self) -> tuple:
        return self.activation_shapes()[-1]


# --------------------------------------------------------------------------
# loop geometry shared with the intermittent runtime


@dataclass
class LoopGeometry:
    """Index arithmetic for one layer's canonical loop nest.

    ``O`` is the flat output index, ``W`` the position inside the reduction
    (in_ch, k_row, k_col for conv; in_feature for fc), ``I`` the flat input
    index that position reads.
    """

    kind: LayerKind
    in_shape: tuple
    out_shape: tuple
    dims: tuple
    n_outputs: int = field(init=False)
    reduction: int = field(init=False)

    def __post_init__(self):
        self.n_outputs = int(np.prod(self.out_shape))
        if self.kind == LayerKind.CONV2D:
            _, ic, kh, kw = self.dims
            self.reduction = ic * kh * kw
        elif self.kind == LayerKind.FULLY_CONNECTED:
            self.reduction = self.dims[1]
        elif self.kind == LayerKind.MAXPOOL:
            self.reduction = int(np.prod(self.dims))
        else:
            self.reduction = 1

    def input_index(self, o: int, w: int) -> int:
        k = self.kind
        if k == LayerKind.FULLY_CONNECTED:
            return w
        if k == LayerKind.RELU:
            return o
        _, h, wd = self.in_shape
        oc_n, oh, ow = self.out_shape
        ch, rem = divmod(o, oh * ow)
        r, c = divmod(rem, ow)
        if k == LayerKind.CONV2D:
            _, _, kh, kw = self.dims
            ic, krem = divmod(w, kh * kw)
            kr, kc = divmod(krem, kw)
            return ic * h * wd + (r + kr) * wd + (c + kc)
        wc, wh, ww = self.dims
        dc, wrem = divmod(w, wh * ww)
        dr, dcol = divmod(wrem, ww)
        return (ch * wc + dc) * h * wd + (r * wh + dr) * wd + (c * ww + dcol)

    def output_channel(self, o: int) -> int:
        if self.kind == LayerKind.FULLY_CONNECTED:
            return o
        return o // (self.out_shape[1] * self.out_shape[2])

    def weight_index(self, o: int, w: int) -> int:
        return self.output_channel(o) * self.reduction + w

    def window_indices(self, o: int) -> list:
        return [self.input_index(o, w) for w in range(self.reduction)]

    def row_length(self) -> int:
        """Outputs per output row (the OutputRow unit)."""
        if len(self.out_shape) == 3:
            return self.out_shape[2]
        return self.n_outputs


def layer_geometries(model: ModelSpec) -> list:
    shapes = model.activation_shapes()
    return [
        LoopGeometry(layer.kind, shapes[i], shapes[i + 1], layer.dims)
        for i, layer in enumerate(model.layers)
    ]


# --------------------------------------------------------------------------
# reference kernels


@dataclass
class OpTally:
    macs: int = 0
    nvm_reads: int = 0
    nvm_writes: int = 0

    def add(self, other: "OpTally"):
        self.macs += other.macs
        self.nvm_reads += other.nvm_reads
        self.nvm_writes += other.nvm_writes

    @property
    def memory_touches(self) -> int:
        return self.nvm_reads + self.nvm_writes


def _saturating_reduce(products: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Sum rows of ``products`` left to right with int32 saturation per step."""
    if products.shape[1] == 0:
        return bias.astype(np.int64)
    partial = np.cumsum(products, axis=1) + bias[:, None]
    acc = partial[:, -1].copy()
    bad = np.nonzero((partial.max(axis=1) > ACC_MAX) | (partial.min(axis=1) < ACC_MIN))[0]
    for row in bad:
        a = int(bias[row])
        for p in products[row].tolist():
            a = sat32(a + p)
        acc[row] = a
    return acc


def _requantize(acc: np.ndarray, shift: int) -> np.ndarray:
    return saturate16(round_shift_array(acc, shift)).astype(np.int16)


def _check_input(input: QTensor, layer: LayerSpec):
    if layer.kind in MAC_KINDS and layer.weights is None:
        raise ConfigurationError(f"layer {layer.id} has no weights")
    return layer.output_shape(input.shape)


def _conv2d(input: QTensor, layer: LayerSpec, mode: InferenceMode):
    if layer.kind != LayerKind.CONV2D:
        raise ConfigurationError(f"layer {layer.id} is {layer.kind.name}, not CONV2D")
    out_shape = _check_input(input, layer)
    oc, ic, kh, kw = layer.dims
    x = input.array().astype(np.int64)
    # (ic, oh, ow, kh, kw) -> (oh*ow, ic*kh*kw) in canonical reduction order
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(out_shape[1] * out_shape[2], ic * kh * kw)
    wmat = layer.weights.array().astype(np.int64).reshape(oc, -1)
    mask = layer.effective_mask(mode)
    bias = layer.bias_values()
    shift = requant_shift(input.scale, layer.weight_scale, layer.out_scale)
    out = np.empty((oc, cols.shape[0]), dtype=np.int16)
    tally = OpTally()
    for o in range(oc):
        active = np.arange(cols.shape[1]) if mask is None else np.flatnonzero(mask[o].reshape(-1))
        prods = cols[:, active] * wmat[o, active][None, :]
        acc = _saturating_reduce(prods, np.full(cols.shape[0], bias[o], dtype=np.int64))
        out[o] = _requantize(acc, shift)
        tally.macs += active.size * cols.shape[0]
        tally.nvm_reads += 2 * active.size * cols.shape[0]
        tally.nvm_writes += cols.shape[0]
    return QTensor(out_shape, out.reshape(-1), layer.out_scale), tally


def _fc(input: QTensor, layer: LayerSpec, mode: InferenceMode):
    if layer.kind != LayerKind.FULLY_CONNECTED:
        raise ConfigurationError(f"layer {layer.id} is {layer.kind.name}, not FULLY_CONNECTED")
    out_shape = _check_input(input, layer)
    n_out, n_in = layer.dims
    x = input.data.astype(np.int64)
    wmat = layer.weights.array().astype(np.int64).reshape(n_out, n_in)
    mask = layer.effective_mask(mode)
    if mask is not None:
        wmat = np.where(mask, wmat, 0)
    prods = wmat * x[None, :]
    if mask is not None:
        # masked entries are skipped, not added as zero; the saturated sums agree either way
        active_counts = mask.sum(axis=1)
    else:
        active_counts = np.full(n_out, n_in)
    acc = _saturating_reduce(prods, layer.bias_values())
    shift = requant_shift(input.scale, layer.weight_scale, layer.out_scale)
    tally = OpTally(
        macs=int(active_counts.sum()),
        nvm_reads=int(2 * active_counts.sum()),
        nvm_writes=n_out,
    )
    return QTensor(out_shape, _requantize(acc, shift), layer.out_scale), tally


def _maxpool(input: QTensor, layer: LayerSpec):
    out_shape = _check_input(input, layer)
    wc, wh, ww = layer.dims
    c, h, w = out_shape
    x = input.array()[: c * wc, : h * wh, : w * ww]
    pooled = x.reshape(c, wc, h, wh, w, ww).max(axis=(1, 3, 5))
    n = pooled.size
    return QTensor(out_shape, pooled.reshape(-1), input.scale), OpTally(0, n * wc * wh * ww, n)


def _relu(input: QTensor, layer: LayerSpec):
    out = np.maximum(input.data, 0)
    return QTensor(input.shape, out, input.scale), OpTally(0, out.size, out.size)


def run_layer(input: QTensor, layer: LayerSpec, mode: InferenceMode = InferenceMode.FULL):
    """Apply one layer; returns ``(output, OpTally)``."""
    if layer.kind == LayerKind.CONV2D:
        return _conv2d(input, layer, mode)
    if layer.kind == LayerKind.FULLY_CONNECTED:
        return _fc(input, layer, mode)
    if layer.kind == LayerKind.MAXPOOL:
        return _maxpool(input, layer)
    return _relu(input, layer)


def conv2d_forward(input: QTensor, layer: LayerSpec, mode: InferenceMode = InferenceMode.FULL) -> QTensor:
    return _conv2d(input, layer, mode)[0]


def fc_forward(input: QTensor, layer: LayerSpec, mode: InferenceMode = InferenceMode.FULL) -> QTensor:
    return _fc(input, layer, mode)[0]


class InferenceResult(NamedTuple):
    output: QTensor
    predicted_class: int
    tally: OpTally


def infer_continuous(
    model: ModelSpec, input: QTensor, mode: InferenceMode = InferenceMode.FULL
) -> InferenceResult:
    """Run every layer back to back, as under uninterrupted power."""
    if tuple(input.shape) != model.input_shape:
        raise DimensionError(f"model expects input {model.input_shape}, got {input.shape}")
    x = input
    tally = OpTally()
    for layer in model.layers:
        x, t = run_layer(x, layer, mode)
        tally.add(t)
    return InferenceResult(x, int(np.argmax(x.data)), tally)


def param_count(model: ModelSpec, mode: InferenceMode = InferenceMode.FULL) -> int:
    """Stored weight count (biases excluded).

    In low-energy mode patterned layers contribute only their mask-active
    weights; a patterned layer without a mask is counted in full.
    """
    total = 0
    for layer in model.layers:
        if layer.kind not in MAC_KINDS:
            continue
        if mode == InferenceMode.LOW_ENERGY and layer.patterned and layer.mask is not None:
            total += int(layer.mask.sum())
        else:
            total += layer.weight_count
    return total


def mac_count(model: ModelSpec, mode: InferenceMode = InferenceMode.FULL) -> int:
    """MACs one inference performs, counted from dims and masks alone."""
    shapes = model.activation_shapes()
    total = 0
    for i, layer in enumerate(model.layers):
        if layer.kind not in MAC_KINDS:
            continue
        mask = layer.effective_mask(mode)
        live = layer.weight_count if mask is None else int(mask.sum())
        if layer.kind == LayerKind.CONV2D:
            positions = shapes[i + 1][1] * shapes[i + 1][2]
        else:
            positions = 1
        total += live * positions
    return total
