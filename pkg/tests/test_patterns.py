import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from ember.arch import random_model
from ember.errors import ConfigurationError, PatternBoundsError
from ember.model import InferenceMode, LayerKind, LayerSpec, ModelSpec, QTensor, param_count
from ember.patterns import (
    PatternMask,
    build_pattern_library,
    concentration_ratio,
    partition_fc_blocks,
    select_topk_mask,
)


def test_topk_picks_largest_magnitudes():
    kernel = np.array([0.5, -0.1, 0.02, 0.3, 0, 0.01, -0.4, 0.05, 0.2]).reshape(3, 3)
    assert set(select_topk_mask(kernel, 4).indices()) == {0, 6, 3, 8}


def test_topk_ties_go_to_lower_index():
    assert select_topk_mask(np.ones((3, 3)), 3).indices() == [0, 1, 2]


def test_topk_accepts_qtensor():
    q = QTensor((2, 2), [5, -9, 1, 2])
    assert select_topk_mask(q, 2).indices() == [0, 1]


def test_topk_5x5_k15_is_l1_optimal_over_all_masks():
    rng = np.random.default_rng(11)
    kernel = rng.normal(size=(5, 5))
    mags = np.abs(kernel).reshape(-1)
    combos = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(25), 15)),
                         dtype=np.int8).reshape(-1, 15)
    assert len(combos) == 3268760
    best = max(mags[chunk].sum(axis=1).max() for chunk in np.array_split(combos, 16))
    got = select_topk_mask(kernel, 15)
    assert got.preserved_l1(kernel) == pytest.approx(best, abs=1e-12)


@given(st.lists(st.integers(-50, 50), min_size=4, max_size=9), st.data())
def test_topk_matches_exhaustive_oracle(values, data):
    k = data.draw(st.integers(0, len(values)))
    best, winners = oracles.best_l1_masks(values, k)
    got = select_topk_mask(np.array(values, dtype=float).reshape(1, -1), k)
    assert set(got.indices()) in winners
    # among equally good masks the lowest indices win
    assert sorted(got.indices()) == min(sorted(w) for w in winners)


def test_topk_bounds():
    with pytest.raises(PatternBoundsError):
        select_topk_mask(np.ones((2, 2)), 5)


def test_pattern_mask_rejects_inconsistent_fields():
    with pytest.raises(ValueError):
        PatternMask((2, 2), 0b0111, 2)
    with pytest.raises(ValueError):
        PatternMask((2, 2), 1 << 4, 1)


@given(st.integers(0, (1 << 9) - 1), st.lists(st.integers(-100, 100), min_size=9, max_size=9))
def test_mask_application_is_idempotent(bits, values):
    m = PatternMask((3, 3), bits, bin(bits).count("1"))
    once = m.apply(np.array(values).reshape(3, 3))
    assert np.array_equal(m.apply(once), once)


def test_fc_block_counts():
    def fc(rows, cols):
        return LayerSpec(LayerKind.FULLY_CONNECTED, (rows, cols))

    blocks = partition_fc_blocks(fc(100, 400), (3, 3))
    assert len(blocks) == 34 * 134 == 4556
    assert (blocks[-1].rows, blocks[-1].cols) == (1, 1)
    assert len(partition_fc_blocks(fc(6, 64), (6, 64))) == 1
    har = partition_fc_blocks(fc(64, 880), (1, 12))
    assert len(har) == 64 * 74
    assert har[73].cols == 880 - 73 * 12 == 4
    covered = np.zeros((100, 400), dtype=int)
    for b in blocks:
        covered[b.slices] += 1
    assert (covered == 1).all()


def test_fc_tiling_rejects_conv_layers():
    with pytest.raises(ConfigurationError):
        partition_fc_blocks(LayerSpec(LayerKind.CONV2D, (1, 1, 3, 3)), (3, 3))


@pytest.fixture(scope="module")
def mnist():
    m = random_model("table1-mnist", 0)
    lib = build_pattern_library(m)
    return lib.attach(m), lib


@pytest.fixture(scope="module")
def gtsrb():
    m = random_model("table1-gtsrb", 0)
    lib = build_pattern_library(m)
    return lib.attach(m), lib


def test_mnist_layer_ratios(mnist):
    m, lib = mnist
    r = concentration_ratio(m, lib)
    assert r[0] == pytest.approx(15 / 25)
    assert r[3] == pytest.approx(3 / 9)
    # full blocks keep 4/9; the partial edge tiles round down
    assert lib.geometries[6].block == (3, 3) and lib.geometries[6].entries == 4
    assert r[6] == pytest.approx(17722 / 40000)
    assert r[8] == 1.0


def test_gtsrb_layer_ratios(gtsrb):
    m, lib = gtsrb
    r = concentration_ratio(m, lib)
    assert r[3] == pytest.approx(4 / 9)
    assert abs(r[6] - 5 / 9) < 0.01
    assert r[0] == 1.0 and r[8] == 1.0


@pytest.mark.parametrize("fixture", ["mnist", "gtsrb"])
def test_active_counts_sum_to_low_energy_param_count(fixture, request):
    m, lib = request.getfixturevalue(fixture)
    masks = lib.masks(m)
    total = sum(int(masks[l.id].sum()) if l.id in masks else l.weight_count
                for l in m.layers if l.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED))
    assert total == param_count(m, InferenceMode.LOW_ENERGY)


def test_assigned_pattern_dominates_library_alternatives(mnist):
    m, lib = mnist
    by_group = {}
    for idx, p in enumerate(lib.patterns):
        by_group.setdefault((p.geometry, p.entry_count), []).append(idx)
    conv2 = m.layers[3]
    w = np.abs(conv2.weights.array().astype(float))
    oc, ic = conv2.dims[:2]
    for o in range(oc):
        for i in range(ic):
            chosen = lib.patterns[lib.assignments[(3, o * ic + i)]]
            kept = chosen.preserved_l1(w[o, i])
            for j in by_group[(chosen.geometry, chosen.entry_count)]:
                assert kept >= lib.patterns[j].preserved_l1(w[o, i]) - 1e-9


def test_library_respects_size_and_geometry(mnist):
    _, lib = mnist
    assert len(lib.patterns) == 10
    full_blocks = {(5, 5), (3, 3)}
    for p in lib.patterns:
        if p.geometry in full_blocks:
            assert p.entry_count in (3, 4, 6, 15)
        else:
            # partial fc edge tile: entries scale down with its area
            assert p.entry_count == 4 * p.geometry[0] * p.geometry[1] // 9


def test_identical_kernels_give_one_pattern_per_group():
    w = np.tile(np.array([9, 1, 5, 2, 8, 3, 7, 4, 6]), 6).reshape(3, 2, 3, 3)
    layer = LayerSpec(LayerKind.CONV2D, (3, 2, 3, 3), 0, QTensor(w.shape, w), np.zeros(3), patterned=True,
                      pattern_target=0.333)
    model = ModelSpec([layer], (2, 5, 5))
    lib = build_pattern_library(model, library_size=10)
    assert len(lib.patterns) == 1
    assert set(lib.assignments.values()) == {0}
    assert set(lib.patterns[0].indices()) == {0, 4, 6}


def test_full_entry_masks_keep_everything():
    layer = LayerSpec(LayerKind.CONV2D, (2, 1, 2, 2), 0, QTensor((2, 1, 2, 2), [1, 2, 3, 4, 5, 6, 7, 8]),
                      np.zeros(2), patterned=True, pattern_geometry=(2, 2, 4))
    model = ModelSpec([layer], (1, 3, 3))
    lib = build_pattern_library(model)
    assert concentration_ratio(model, lib) == {0: 1.0}


def test_attach_returns_copy(mnist):
    m = random_model("reduced-mnist", 0)
    attached = build_pattern_library(m).attach(m)
    assert all(l.mask is None for l in m.layers)
    assert all(l.mask is not None for l in attached.layers if l.patterned)


def test_model_without_patterned_layers_rejected():
    with pytest.raises(ConfigurationError):
        build_pattern_library(random_model("toy-2mac", 0))


def test_low_energy_param_counts_near_table_values():
    expected = {"table1-mnist": 19280, "table1-har": 14166, "table1-gtsrb": 33432}
    for arch, target in expected.items():
        m = random_model(arch, 0)
        m = build_pattern_library(m).attach(m)
        assert abs(param_count(m, InferenceMode.LOW_ENERGY) - target) <= 0.02 * target
