import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from ember.arch import get_architecture, random_model
from ember.errors import ConfigurationError, DimensionError
from ember.experiments import patterned_random_model, random_input
from ember.model import (
    InferenceMode,
    LayerKind,
    LayerSpec,
    ModelSpec,
    QTensor,
    conv2d_forward,
    fc_forward,
    infer_continuous,
    mac_count,
    param_count,
    round_shift,
    run_layer,
)

FULL, LOW = InferenceMode.FULL, InferenceMode.LOW_ENERGY
SEEDS = range(120)


def _random_mac_layer(rng, kind, dims, masked):
    n = int(np.prod(dims))
    # mix full-range values (saturating sums) with small ones (no saturation)
    bound = 1 << 15 if rng.random() < 0.5 else 1 << 9
    w = rng.integers(-bound, bound, size=n)
    w = np.clip(w, -(1 << 15), (1 << 15) - 1)
    bias = rng.integers(-(1 << 31), (1 << 31) - 1, size=dims[0]) if bound > 1 << 9 else rng.integers(-5000, 5000, size=dims[0])
    mask = rng.random(dims) < 0.5 if masked else None
    out_scale = int(rng.integers(-3, 7))
    return LayerSpec(kind, dims, 0, QTensor(dims, w, int(rng.integers(-2, 3))), bias, mask, out_scale,
                     patterned=masked)


def _input(rng, shape, scale=0):
    return QTensor(shape, rng.integers(-(1 << 15), 1 << 15, size=int(np.prod(shape))), scale)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    oc, ic, kh, kw = (int(v) for v in rng.integers(1, 4, size=4))
    h, w = int(rng.integers(kh, kh + 4)), int(rng.integers(kw, kw + 4))
    masked = bool(seed % 2)
    layer = _random_mac_layer(rng, LayerKind.CONV2D, (oc, ic, kh, kw), masked)
    x = _input(rng, (ic, h, w), int(rng.integers(-1, 2)))
    shift = 15 + layer.out_scale - x.scale - layer.weight_scale
    expected = oracles.conv2d(x.array().tolist(), layer.weights.array().tolist(),
                              layer.bias.tolist(), shift, layer.mask.tolist() if masked else None)
    got = conv2d_forward(x, layer, LOW if masked else FULL)
    assert got.array().tolist() == expected
    assert got.scale == layer.out_scale


@pytest.mark.parametrize("seed", SEEDS)
def test_fc_matches_scalar_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    n_out, n_in = int(rng.integers(1, 8)), int(rng.integers(1, 20))
    masked = bool(seed % 2)
    layer = _random_mac_layer(rng, LayerKind.FULLY_CONNECTED, (n_out, n_in), masked)
    x = _input(rng, (n_in,), int(rng.integers(-1, 2)))
    shift = 15 + layer.out_scale - x.scale - layer.weight_scale
    expected = oracles.fc(x.data.tolist(), layer.weights.array().tolist(), layer.bias.tolist(), shift,
                          layer.mask.tolist() if masked else None)
    assert fc_forward(x, layer, LOW if masked else FULL).data.tolist() == expected


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_matches_scalar_oracle(seed):
    rng = np.random.default_rng(2000 + seed)
    window = tuple(int(v) for v in rng.integers(1, 4, size=3))
    shape = tuple(int(window[i] * rng.integers(1, 4) + rng.integers(0, window[i])) for i in range(3))
    layer = LayerSpec(LayerKind.MAXPOOL, window)
    x = _input(rng, shape)
    out, _ = run_layer(x, layer)
    assert out.array().tolist() == oracles.maxpool(x.array().tolist(), window)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_matches_scalar_oracle(seed):
    rng = np.random.default_rng(3000 + seed)
    x = _input(rng, (int(rng.integers(1, 50)),))
    out, _ = run_layer(x, LayerSpec(LayerKind.RELU, ()))
    assert out.data.tolist() == oracles.relu(x.data.tolist())


def test_conv_seed42_within_one_ulp_of_float_convolution():
    rng = np.random.default_rng(42)
    w = rng.integers(-4000, 4000, size=(3, 2, 3, 3))
    x = rng.integers(0, 1 << 15, size=(2, 6, 7))
    bias = rng.integers(-(1 << 20), 1 << 20, size=3)
    layer = LayerSpec(LayerKind.CONV2D, (3, 2, 3, 3), 0, QTensor(w.shape, w, 0), bias, out_scale=3)
    got = conv2d_forward(QTensor(x.shape, x, 0), layer).array()
    # real-valued convolution, result expressed in output Q15 units
    xf, wf = x * 2.0 ** -15, w * 2.0 ** -15
    ref = np.zeros(got.shape)
    for o in range(3):
        for r in range(4):
            for c in range(5):
                ref[o, r, c] = (xf[:, r:r + 3, c:c + 3] * wf[o]).sum() + bias[o] * 2.0 ** -30
    ref_q = ref / 2.0 ** (3 - 15)
    assert np.max(np.abs(got - ref_q)) <= 1.0


def test_conv_all_ones_window_sums():
    one = 1 << 14  # 0.5 at scale 0, so 4 * 0.5 * 0.5 = 1.0 fits Q15 at scale 1
    layer = LayerSpec(LayerKind.CONV2D, (1, 1, 2, 2), 0, QTensor((1, 1, 2, 2), [one] * 4, 0), [0], out_scale=1)
    out = conv2d_forward(QTensor((1, 3, 3), [one] * 9, 0), layer)
    assert out.shape == (1, 2, 2)
    assert np.allclose(out.to_float(), 1.0)


def test_conv_unit_kernel_is_identity():
    rng = np.random.default_rng(7)
    x = _input(rng, (1, 4, 5))
    # weight 1.0 needs scale 1 (Q15 at scale 1 holds 1.0 as 2**14)
    layer = LayerSpec(LayerKind.CONV2D, (1, 1, 1, 1), 0, QTensor((1, 1, 1, 1), [1 << 14], 1), [0], out_scale=x.scale)
    assert conv2d_forward(x, layer) == x


def test_fc_identity_and_zero_weights():
    rng = np.random.default_rng(8)
    x = _input(rng, (6,))
    eye = np.eye(6, dtype=np.int64) * (1 << 14)
    ident = LayerSpec(LayerKind.FULLY_CONNECTED, (6, 6), 0, QTensor((6, 6), eye, 1), np.zeros(6), out_scale=0)
    assert fc_forward(x, ident) == x
    zero = LayerSpec(LayerKind.FULLY_CONNECTED, (6, 6), 0, QTensor((6, 6), np.zeros(36), 0), np.zeros(6))
    assert not fc_forward(x, zero).data.any()


def test_relu_only_model_zeroes_negative_input():
    model = ModelSpec([LayerSpec(LayerKind.RELU, ())], (5,))
    out, cls, _ = infer_continuous(model, QTensor((5,), [-1, -100, -32768, -7, -2]))
    assert not out.data.any()


@pytest.mark.parametrize("arch,classes", [("table1-mnist", 10), ("table1-har", 6), ("table1-gtsrb", 43)])
def test_table_architectures_compose_to_class_count(arch, classes):
    m = random_model(arch, 0)
    assert m.output_shape == (classes,)
    res = infer_continuous(m, random_input(m, 0))
    assert res.output.size == classes
    assert 0 <= res.predicted_class < classes


@pytest.mark.parametrize("arch,full", [("table1-mnist", 200 + 1152 + 40000 + 1000),
                                       ("table1-har", 8 * 12 + 64 * 880 + 6 * 64),
                                       ("table1-gtsrb", 432 + 576 + 51200 + 4300)])
def test_param_count_full(arch, full):
    assert param_count(random_model(arch, 0), FULL) == full


def _analytic_macs(model, mode):
    """Active weights per output channel times that channel's output positions."""
    shapes = model.activation_shapes()
    total = 0
    for i, layer in enumerate(model.layers):
        if layer.kind not in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            continue
        positions = 1 if layer.kind == LayerKind.FULLY_CONNECTED else shapes[i + 1][1] * shapes[i + 1][2]
        if mode == LOW and layer.patterned:
            total += int(layer.mask.sum()) * positions
        else:
            total += layer.weight_count * positions
    return total


@pytest.mark.parametrize("arch", ["table1-mnist", "table1-har", "table1-gtsrb", "reduced-mnist"])
def test_mac_tally_matches_analytic_count(arch):
    m = patterned_random_model(arch, 1)
    x = random_input(m, 1)
    for mode in (FULL, LOW):
        expected = _analytic_macs(m, mode)
        assert infer_continuous(m, x, mode).tally.macs == expected
        assert mac_count(m, mode) == expected


def test_mnist_low_energy_macs_follow_concentration_ratios():
    m = patterned_random_model("table1-mnist", 0)
    # conv1 keeps 15/25, conv2 3/9; fc1 tiles 100x400 into 33x133 full 3x3
    # blocks of 4 entries, plus 3x1 and 1x3 edge blocks keeping floor(4*3/9) = 1
    # and a 1x1 corner keeping 0; fc2 is exempt
    fc1 = 33 * 133 * 4 + 33 * 1 + 133 * 1 + 0
    expected = 8 * 15 * 24 * 24 + 16 * 8 * 3 * 10 * 10 + fc1 + 1000
    assert infer_continuous(m, random_input(m, 0), LOW).tally.macs == expected


def test_exempt_layers_identical_between_modes():
    m = patterned_random_model("reduced-mnist", 3)
    x = random_input(m, 3)
    a, b = x, x
    for layer in m.layers:
        a2, _ = run_layer(a, layer, FULL)
        if not layer.patterned:
            # same input through an exempt layer gives the same output in either mode
            assert run_layer(a, layer, LOW)[0] == a2
        a, b = a2, run_layer(b, layer, LOW)[0]


def test_kernels_are_deterministic():
    m = patterned_random_model("reduced-mnist", 5)
    x = random_input(m, 5)
    first = infer_continuous(m, x, LOW).output
    for _ in range(3):
        assert infer_continuous(m, x, LOW).output == first


def test_patterned_layer_without_mask_rejected_in_low_energy():
    m = random_model("reduced-mnist", 0)
    with pytest.raises(ConfigurationError):
        infer_continuous(m, random_input(m, 0), LOW)


def test_shape_errors():
    with pytest.raises(DimensionError):
        QTensor((2, 2), [1, 2, 3])
    with pytest.raises(DimensionError):
        QTensor((1,), [40000])
    with pytest.raises(DimensionError):
        LayerSpec(LayerKind.CONV2D, (1, 2, 3))
    m = random_model("reduced-mnist", 0)
    with pytest.raises(DimensionError):
        infer_continuous(m, QTensor((1, 9, 9), np.zeros(81)))


def test_layer_ids_must_be_consecutive():
    layers = [LayerSpec(LayerKind.RELU, (), 0), LayerSpec(LayerKind.RELU, (), 2)]
    with pytest.raises(ConfigurationError):
        ModelSpec(layers, (3,)).validate()


@given(st.integers(-(1 << 40), 1 << 40), st.integers(0, 40))
def test_round_shift_matches_exact_rounding(acc, shift):
    assert round_shift(acc, shift) == oracles.round_half_away(oracles.Fraction(acc, 2 ** shift))


@given(st.lists(st.floats(-1.0, 0.99996, allow_nan=False), min_size=1, max_size=20))
def test_qtensor_float_round_trip_within_one_ulp(values):
    q = QTensor.from_float(values, 0)
    assert np.all(np.abs(q.to_float() - np.asarray(values)) <= 2.0 ** -15)


def test_architecture_lookup_error_names_choices():
    with pytest.raises(KeyError, match="table1-mnist"):
        get_architecture("nope")
