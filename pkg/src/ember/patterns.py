"""Kernel-pattern libraries and the low-energy (concentrated) weight view.

Conv layers are masked per 2-D kernel (one kh x kw slice per (out, in)
channel pair).  Fully connected matrices are tiled row-major into blocks that
play the role of kernels; edge tiles that run off the matrix keep a
proportionally smaller entry count, rounded down.

A library holds a small set of masks shared by all patterned layers.  Masks
are grouped by (block rows, block cols, entries); every kernel or block is
assigned the mask from its group that preserves the most L1 weight mass.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ember.errors import ConfigurationError, PatternBoundsError
from ember.model import LayerKind, LayerSpec, QTensor

log = logging.getLogger(__name__)

ENTRY_SIZES = (3, 4, 6, 15)
DEFAULT_LIBRARY_SIZE = 10
DEFAULT_FC_BLOCK = (3, 3)


@dataclass(frozen=True)
class PatternMask:
    geometry: tuple
    active: int
    entry_count: int

    def __post_init__(self):
        if bin(self.active).count("1") != self.entry_count:
            raise ValueError("entry_count must equal the number of active bits")
        if self.active >> (self.geometry[0] * self.geometry[1]):
            raise ValueError("active bits outside the pattern geometry")

    @classmethod
    def from_array(cls, flags) -> "PatternMask":
        flags = np.atleast_2d(np.asarray(flags, dtype=bool))
        bits = 0
        for i in np.flatnonzero(flags.reshape(-1)):
            bits |= 1 << int(i)
        return cls(flags.shape, bits, int(flags.sum()))

    def to_array(self) -> np.ndarray:
        n = self.geometry[0] * self.geometry[1]
        flat = np.array([(self.active >> i) & 1 for i in range(n)], dtype=bool)
        return flat.reshape(self.geometry)

    def indices(self) -> list:
        return [i for i in range(self.geometry[0] * self.geometry[1]) if (self.active >> i) & 1]

    def apply(self, values):
        values = np.asarray(values)
        return np.where(self.to_array().reshape(values.shape), values, 0)

    def preserved_l1(self, values) -> float:
        mags = np.abs(np.asarray(values, dtype=np.float64)).reshape(-1)
        return float(mags[self.indices()].sum())


def _values(kernel):
    if isinstance(kernel, QTensor):
        return kernel.array()
    return np.asarray(kernel)


def select_topk_mask(kernel, k: int) -> PatternMask:
    """Keep the ``k`` largest-magnitude entries; ties go to the lower flat index."""
    values = _values(kernel)
    if values.ndim < 2:
        values = values.reshape(1, -1)
    values = values.reshape(values.shape[-2], values.shape[-1])
    n = values.size
    if k > n or k < 0:
        raise PatternBoundsError(f"cannot keep {k} entries of a {n}-entry kernel")
    mags = np.abs(values.astype(np.float64)).reshape(-1)
    order = np.argsort(-mags, kind="stable")[:k]
    flags = np.zeros(n, dtype=bool)
    flags[order] = True
    return PatternMask.from_array(flags.reshape(values.shape))


@dataclass(frozen=True)
class BlockView:
    index: int
    row: int
    col: int
    rows: int
    cols: int

    @property
    def slices(self):
        return slice(self.row, self.row + self.rows), slice(self.col, self.col + self.cols)

    def take(self, matrix):
        return np.asarray(matrix)[self.slices]


def _tile(shape, block_shape) -> list:
    n_rows, n_cols = shape
    bh, bw = block_shape
    if bh < 1 or bw < 1:
        raise ConfigurationError(f"block shape {block_shape} must be positive")
    views = []
    for r in range(0, n_rows, bh):
        for c in range(0, n_cols, bw):
            views.append(BlockView(len(views), r, c, min(bh, n_rows - r), min(bw, n_cols - c)))
    return views


def partition_fc_blocks(layer: LayerSpec, block_shape) -> list:
    """Row-major, non-overlapping tiling of an FC weight matrix."""
    if layer.kind != LayerKind.FULLY_CONNECTED:
        raise ConfigurationError(f"layer {layer.id} is {layer.kind.name}; only FC layers are tiled")
    return _tile(layer.dims, tuple(block_shape))


def edge_entries(k: int, rows: int, cols: int, block_shape) -> int:
    """Entry count for a (possibly partial) block: k scaled by area, rounded down."""
    full = block_shape[0] * block_shape[1]
    return (k * rows * cols) // full


def _active_total(shape, block_shape, k) -> int:
    """Kept entries over a whole tiling, without materializing the tiles."""
    (n_rows, n_cols), (bh, bw) = shape, block_shape
    full_r, rem_r = divmod(n_rows, bh)
    full_c, rem_c = divmod(n_cols, bw)
    total = full_r * full_c * k
    total += full_r * edge_entries(k, bh, rem_c, block_shape)
    total += full_c * edge_entries(k, rem_r, bw, block_shape)
    total += edge_entries(k, rem_r, rem_c, block_shape)
    return total


@dataclass(frozen=True)
class LayerGeometry:
    """How one patterned layer is cut into maskable units."""

    layer_id: int
    kind: LayerKind
    block: tuple
    entries: int

    def ratio(self, dims) -> float:
        if self.kind == LayerKind.CONV2D:
            return self.entries / (self.block[0] * self.block[1])
        return _active_total(dims, self.block, self.entries) / (dims[0] * dims[1])


def choose_geometry(layer, target: float, entry_sizes=ENTRY_SIZES, tolerance: float = 0.01) -> LayerGeometry:
    """Pick a block shape and entry count whose kept fraction is closest to ``target``.

    Conv kernels are fixed by the layer.  FC layers try the default 3x3 block
    first and only search other shapes when no entry size lands within
    ``tolerance`` of the target.
    """
    if layer.kind == LayerKind.CONV2D:
        _, _, kh, kw = layer.dims
        area = kh * kw
        fits = [k for k in entry_sizes if k <= area]
        if not fits:
            raise ConfigurationError(f"no entry size fits a {kh}x{kw} kernel")
        k = min(fits, key=lambda k: (abs(k / area - target), k))
        return LayerGeometry(layer.id, layer.kind, (kh, kw), k)

    dims = layer.dims

    def score(block, k):
        return abs(_active_total(dims, block, k) / (dims[0] * dims[1]) - target)

    best = min(
        ((score(DEFAULT_FC_BLOCK, k), k) for k in entry_sizes if k <= 9),
        default=(np.inf, None),
    )
    if best[0] <= tolerance:
        return LayerGeometry(layer.id, layer.kind, DEFAULT_FC_BLOCK, best[1])
    candidates = []
    for bh in range(1, min(8, dims[0]) + 1):
        for bw in range(1, min(64, dims[1]) + 1):
            for k in entry_sizes:
                if k <= bh * bw:
                    candidates.append((score((bh, bw), k), bh * bw, bh, bw, k))
    if not candidates:
        raise ConfigurationError(f"layer {layer.id}: no block geometry available")
    _, _, bh, bw, k = min(candidates)
    return LayerGeometry(layer.id, layer.kind, (bh, bw), k)


def _units(layer_kind, weights: np.ndarray, geom: LayerGeometry):
    """Yield (unit index, group key, values, placement) for every maskable unit."""
    if layer_kind == LayerKind.CONV2D:
        oc, ic, kh, kw = weights.shape
        for o in range(oc):
            for i in range(ic):
                yield o * ic + i, (kh, kw, geom.entries), weights[o, i], (o, i)
    else:
        for v in _tile(weights.shape, geom.block):
            k = edge_entries(geom.entries, v.rows, v.cols, geom.block)
            yield v.index, (v.rows, v.cols, k), v.take(weights), v


@dataclass
class PatternLibrary:
    patterns: list = field(default_factory=list)
    # (layer id, kernel/block index) -> index into ``patterns``
    assignments: dict = field(default_factory=dict)
    geometries: dict = field(default_factory=dict)

    def layer_mask(self, layer_id: int, weight_shape) -> np.ndarray:
        geom = self.geometries[layer_id]
        mask = np.zeros(weight_shape, dtype=bool)
        for unit, _, _, place in _units(geom.kind, np.zeros(weight_shape), geom):
            pat = self.patterns[self.assignments[(layer_id, unit)]].to_array()
            if geom.kind == LayerKind.CONV2D:
                mask[place] = pat
            else:
                mask[place.slices] = pat
        return mask

    def masks(self, model) -> dict:
        return {
            lid: self.layer_mask(lid, model.layers[lid].weight_shape)
            for lid in self.geometries
        }

    def attach(self, model):
        """Copy of a ModelSpec with every patterned layer's mask filled in."""
        masks = self.masks(model)
        layers = [
            dataclasses.replace(layer, mask=masks.get(layer.id, layer.mask))
            for layer in model.layers
        ]
        return dataclasses.replace(model, layers=layers)

    def group_sizes(self) -> Counter:
        return Counter((p.geometry, p.entry_count) for p in self.patterns)


def _layer_weights(layer) -> np.ndarray:
    w = layer.weights
    if isinstance(w, QTensor):
        return w.array().astype(np.float64)
    return np.asarray(w, dtype=np.float64).reshape(layer.dims)


def _resolve_geometry(layer, entry_sizes) -> LayerGeometry:
    spec = getattr(layer, "pattern_geometry", None)
    if spec:
        bh, bw, k = spec
        return LayerGeometry(layer.id, layer.kind, (bh, bw), k)
    target = getattr(layer, "pattern_target", None)
    if target is None:
        raise ConfigurationError(f"patterned layer {layer.id} has neither a target ratio nor a geometry")
    return choose_geometry(layer, target, entry_sizes)


def build_pattern_library(
    model,
    entry_sizes=ENTRY_SIZES,
    library_size: int = DEFAULT_LIBRARY_SIZE,
    split: Optional[dict] = None,
) -> PatternLibrary:
    """Cluster per-unit top-k masks into a shared library and assign them.

    Each (block shape, entries) group is guaranteed one pattern, its most
    frequent mask.  The remaining ``library_size`` slots go to the most
    frequent masks overall, unless ``split`` fixes a slot count per entry
    size.
    """
    patterned = [layer for layer in model.layers if getattr(layer, "patterned", False)]
    if not patterned:
        raise ConfigurationError("model has no patterned layers")

    geometries = {}
    unit_records = []  # (layer id, unit, group, values)
    freq: dict = {}
    for layer in patterned:
        geom = _resolve_geometry(layer, entry_sizes)
        geometries[layer.id] = geom
        weights = _layer_weights(layer)
        for unit, group, values, _ in _units(layer.kind, weights, geom):
            m = select_topk_mask(values, group[2])
            freq.setdefault(group, Counter())[m.active] += 1
            unit_records.append((layer.id, unit, group, values))

    groups = list(freq)
    chosen = {g: [] for g in groups}
    ranked = {
        g: sorted(freq[g].items(), key=lambda kv: (-kv[1], kv[0])) for g in groups
    }
    for g in groups:
        chosen[g].append(ranked[g][0][0])

    if split:
        for g in groups:
            want = split.get(g[2], 1)
            chosen[g] = [bits for bits, _ in ranked[g][:max(1, want)]]
    else:
        if library_size < len(groups):
            log.warning("library_size %d < %d mask groups; keeping one pattern per group",
                        library_size, len(groups))
        leftovers = sorted(
            ((count, g, bits) for g in groups for bits, count in ranked[g][1:]),
            key=lambda t: (-t[0], groups.index(t[1]), t[2]),
        )
        for _, g, bits in leftovers[: max(0, library_size - len(groups))]:
            chosen[g].append(bits)

    patterns, index = [], {}
    for g in groups:
        for bits in chosen[g]:
            index[(g, bits)] = len(patterns)
            patterns.append(PatternMask((g[0], g[1]), bits, g[2]))

    stacks = {
        g: np.array([PatternMask((g[0], g[1]), b, g[2]).to_array().reshape(-1) for b in chosen[g]],
                    dtype=np.float64)
        for g in groups
    }
    assignments = {}
    for lid, unit, g, values in unit_records:
        preserved = stacks[g] @ np.abs(values).reshape(-1)
        # argmax returns the first maximum: ties go to the earlier library entry
        assignments[(lid, unit)] = index[(g, chosen[g][int(np.argmax(preserved))])]
    return PatternLibrary(patterns, assignments, geometries)


def concentration_ratio(model, library: PatternLibrary) -> dict:
    """Kept-weight fraction per MAC layer; exempt layers report 1.0."""
    out = {}
    for layer in model.layers:
        if layer.kind not in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            continue
        if layer.id in library.geometries:
            mask = library.layer_mask(layer.id, layer.weight_shape)
            out[layer.id] = mask.sum() / mask.size
        else:
            out[layer.id] = 1.0
    return out


def format_ratio(layer, ratio: float) -> str:
    if not getattr(layer, "patterned", False):
        return "—"
    return f"{100 * ratio:.2f}%"
