"""Float training, pattern pruning, two-phase fine-tuning, and Q15 export.

Training runs in float64 numpy (im2col convolutions, SGD with momentum,
softmax cross-entropy).  Freezing is enforced twice: gradients of frozen
entries are masked out, and frozen values are restored after every step.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ember.arch import get_architecture
from ember.datasets import Dataset
from ember.errors import ExportError, TrainingError
from ember.model import MAC_KINDS, InferenceMode, LayerKind, LayerSpec, ModelSpec, QTensor, quantize_values
from ember.patterns import PatternLibrary, build_pattern_library

PHASES = ("baseline", "phase1", "phase2")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 8
    batch_size: int = 32
    seed: int = 0
    phase: str = "baseline"
    momentum: float = 0.9
    lr_decay: float = 0.85
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")


@dataclass
class FloatLayer:
    kind: LayerKind
    dims: tuple
    id: int = 0
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    name: str = ""
    patterned: bool = False
    pattern_target: Optional[float] = None
    pattern_geometry: Optional[tuple] = None
    # frozen inference-form batch norm after the linear op: gamma, beta, mean, var, eps
    bn: Optional[tuple] = None

    @property
    def weight_shape(self) -> tuple:
        return tuple(self.dims) if self.kind in MAC_KINDS else ()

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.dims)) if self.kind in MAC_KINDS else 0


@dataclass
class FloatModel:
    layers: list
    input_shape: tuple
    name: str = "model"
    n_classes: int = 10

    @classmethod
    def from_architecture(cls, arch, seed: int = 0) -> "FloatModel":
        if isinstance(arch, str):
            arch = get_architecture(arch)
        rng = np.random.default_rng(seed)
        layers = []
        for i, t in enumerate(arch.layers):
            w = b = None
            if t.kind in MAC_KINDS:
                fan_in = int(np.prod(t.dims[1:]))
                w = rng.standard_normal(t.dims) * math.sqrt(2.0 / fan_in)
                b = np.zeros(t.dims[0])
            layers.append(FloatLayer(t.kind, tuple(t.dims), i, w, b, t.name, t.patterned,
                                     t.pattern_target, t.pattern_geometry))
        return cls(layers, tuple(arch.input_shape), arch.name, arch.n_classes)

    def copy(self) -> "FloatModel":
        layers = [dataclasses.replace(l, weights=None if l.weights is None else l.weights.copy(),
                                      bias=None if l.bias is None else l.bias.copy())
                  for l in self.layers]
        return dataclasses.replace(self, layers=layers)

    def params(self):
        for l in self.layers:
            if l.kind in MAC_KINDS:
                yield l

    def param_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.params())


# --------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    oh, ow = h - kh + 1, w - kw + 1
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _bn_affine(layer: FloatLayer):
    gamma, beta, mean, var, eps = layer.bn
    scale = np.asarray(gamma) / np.sqrt(np.asarray(var) + eps)
    return scale, np.asarray(beta) - scale * np.asarray(mean)


def forward(model: FloatModel, x: np.ndarray, masks: Optional[dict] = None, keep: bool = False):
    """Logits for a batch ``x`` of shape (N, *input_shape).

    ``masks`` maps layer id to a boolean weight mask applied on the fly
    (low-energy evaluation).  With ``keep`` the per-layer caches needed by
    :func:`backward` are returned too.
    """
    caches = []
    a = x.astype(np.float64)
    n = a.shape[0]
    for layer in model.layers:
        k = layer.kind
        if k in MAC_KINDS:
            w = layer.weights
            if masks and layer.id in masks:
                w = w * masks[layer.id]
            wmat = w.reshape(layer.dims[0], -1)
            if k == LayerKind.CONV2D:
                _, _, kh, kw = layer.dims
                oh, ow = a.shape[2] - kh + 1, a.shape[3] - kw + 1
                cols = _im2col(a, kh, kw)
                z = cols @ wmat.T + layer.bias
                out = z.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
                cache = (cols, a.shape, wmat)
            else:
                cols = a.reshape(n, -1)
                out = cols @ wmat.T + layer.bias
                cache = (cols, a.shape, wmat)
            if layer.bn is not None:
                scale, shift = _bn_affine(layer)
                shape = (1, -1, 1, 1) if out.ndim == 4 else (1, -1)
                out = out * scale.reshape(shape) + shift.reshape(shape)
            caches.append(cache)
            a = out
        elif k == LayerKind.RELU:
            caches.append(a > 0)
            a = np.maximum(a, 0)
        else:
            wc, wh, ww = layer.dims
            _, c, h, w = a.shape
            oc, oh, ow = c // wc, h // wh, w // ww
            crop = a[:, :oc * wc, :oh * wh, :ow * ww]
            blocks = crop.reshape(n, oc, wc, oh, wh, ow, ww).transpose(0, 1, 3, 5, 2, 4, 6).reshape(n, oc, oh, ow, -1)
            idx = blocks.argmax(axis=-1)
            caches.append((idx, a.shape))
            a = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if keep:
        return a, caches
    return a


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward(model: FloatModel, caches: list, dlogits: np.ndarray, masks: Optional[dict] = None) -> dict:
    """Gradients {layer id: (dW, db)} of the loss whose logit gradient is ``dlogits``."""
    grads = {}
    g = dlogits
    n = g.shape[0]
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        k = layer.kind
        if k in MAC_KINDS:
            cols, in_shape, wmat = cache
            if layer.bn is not None:
                scale, _ = _bn_affine(layer)
                g = g * (scale.reshape((1, -1, 1, 1)) if g.ndim == 4 else scale.reshape(1, -1))
            if k == LayerKind.CONV2D:
                oc = layer.dims[0]
                g2 = g.transpose(0, 2, 3, 1).reshape(-1, oc)
                dw = (g2.T @ cols).reshape(layer.dims)
                db = g2.sum(axis=0)
                dcols = g2 @ wmat
                _, c, h, w = in_shape
                _, _, kh, kw = layer.dims
                oh, ow = h - kh + 1, w - kw + 1
                dcols = dcols.reshape(n, oh, ow, c, kh, kw)
                dx = np.zeros(in_shape)
                for i in range(kh):
                    for j in range(kw):
                        dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            else:
                dw = (g.T @ cols).reshape(layer.dims)
                db = g.sum(axis=0)
                dx = (g @ wmat).reshape(in_shape)
            if masks and layer.id in masks:
                dw = dw * masks[layer.id]
            grads[layer.id] = (dw, db)
            g = dx
        elif k == LayerKind.RELU:
            g = g * cache
        else:
            idx, in_shape = cache
            wc, wh, ww = layer.dims
            _, oc, oh, ow = g.shape
            blocks = np.zeros((n, oc, oh, ow, wc * wh * ww))
            np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
            blocks = blocks.reshape(n, oc, oh, ow, wc, wh, ww).transpose(0, 1, 4, 2, 5, 3, 6)
            dx = np.zeros(in_shape)
            dx[:, :oc * wc, :oh * wh, :ow * ww] = blocks.reshape(n, oc * wc, oh * wh, ow * ww)
            g = dx
    return grads


def loss_and_grads(model: FloatModel, x, y, masks=None):
    logits, caches = forward(model, x, masks, keep=True)
    loss, dl = softmax_xent(logits, y)
    return loss, backward(model, caches, dl, masks)


def accuracy(model: FloatModel, x, y, masks=None, batch: int = 500) -> float:
    if len(x) == 0:
        return 0.0
    hits = 0
    for i in range(0, len(x), batch):
        hits += int((forward(model, x[i:i + batch], masks).argmax(axis=1) == y[i:i + batch]).sum())
    return hits / len(x)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: FloatModel
    accuracy: float
    log: list = field(default_factory=list)


def _sgd(model: FloatModel, data: Dataset, config: TrainConfig, trainable: dict, bias_trainable: dict,
         eval_masks: Optional[dict], stage: str, log: Optional[list]) -> TrainResult:
    """Minibatch SGD where ``trainable[id]`` (bool array or None for all) selects
    updatable weights and ``bias_trainable[id]`` whether the bias moves."""
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    params = list(model.params())
    frozen_w = {l.id: l.weights.copy() for l in params}
    frozen_b = {l.id: l.bias.copy() for l in params}
    vel = {l.id: (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params}
    lr = config.learning_rate
    log = log if log is not None else []
    n = len(data.x_train)
    for epoch in range(config.epochs):
        t0 = time.time()
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = loss_and_grads(model, data.x_train[idx], data.y_train[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"{stage}: loss became non-finite in epoch {epoch}", epoch, stage)
            total += loss
            batches += 1
            for l in params:
                dw, db = grads[l.id]
                if config.weight_decay:
                    dw = dw + config.weight_decay * l.weights
                tm = trainable.get(l.id)
                if tm is not None:
                    dw = dw * tm
                vw, vb = vel[l.id]
                vw *= config.momentum
                vw -= lr * dw
                l.weights += vw
                if tm is not None:
                    l.weights[~tm] = frozen_w[l.id][~tm]
                if bias_trainable.get(l.id, True):
                    vb *= config.momentum
                    vb -= lr * db
                    l.bias += vb
                else:
                    l.bias[...] = frozen_b[l.id]
        acc = accuracy(model, data.x_test, data.y_test, eval_masks)
        log.append({"stage": stage, "epoch": epoch, "loss": total / max(batches, 1),
                    "accuracy": acc, "lr": lr, "seconds": round(time.time() - t0, 3)})
        lr *= config.lr_decay
    return TrainResult(model, accuracy(model, data.x_test, data.y_test, eval_masks), log)


def _all_trainable(model):
    return {l.id: None for l in model.params()}


def train_baseline(model: FloatModel, data: Dataset, config: TrainConfig, log=None) -> TrainResult:
    return _sgd(model, data, config, _all_trainable(model), {}, None, "baseline", log)


def library_masks(model: FloatModel, library: PatternLibrary) -> dict:
    return library.masks(model)


def apply_pattern_prune(model: FloatModel, library: PatternLibrary, data: Optional[Dataset] = None):
    """Zero every weight outside its assigned pattern; returns (model, accuracy or None)."""
    pruned = model.copy()
    masks = library.masks(pruned)
    for l in pruned.params():
        if l.id in masks:
            l.weights = np.where(masks[l.id], l.weights, 0.0)
    acc = accuracy(pruned, data.x_test, data.y_test) if data is not None else None
    return pruned, acc


def finetune_phase1(model: FloatModel, library: PatternLibrary, data: Dataset, config: TrainConfig,
                    log=None) -> TrainResult:
    """Train mask-active weights (plus exempt layers and biases); masked-out stay zero."""
    masks = library.masks(model)
    start = model.copy()
    for l in start.params():
        if l.id in masks:
            l.weights = np.where(masks[l.id], l.weights, 0.0)
    trainable = {l.id: masks.get(l.id) for l in start.params()}
    return _sgd(start, data, config, trainable, {}, masks, "phase1", log)


def finetune_phase2(model: FloatModel, library: PatternLibrary, data: Dataset, config: TrainConfig,
                    log=None) -> TrainResult:
    """Train only the masked-out positions of patterned layers.

    Concentrated weights, exempt layers and all biases are frozen, so the
    low-energy network is bit-for-bit the phase-1 one.
    """
    masks = library.masks(model)
    trainable, bias_trainable = {}, {}
    for l in model.params():
        if l.id in masks:
            trainable[l.id] = ~masks[l.id]
        else:
            trainable[l.id] = np.zeros(l.weights.shape, dtype=bool)
        bias_trainable[l.id] = False
    return _sgd(model, data, config, trainable, bias_trainable, None, "phase2", log)


# --------------------------------------------------------------------------
# export


def fold_batchnorm(weights: np.ndarray, bias: np.ndarray, bn: tuple):
    """Fold an inference-form batch norm into the preceding linear layer."""
    gamma, beta, mean, var, eps = bn
    scale = np.asarray(gamma) / np.sqrt(np.asarray(var) + eps)
    w = weights * scale.reshape((-1,) + (1,) * (weights.ndim - 1))
    b = (bias - np.asarray(mean)) * scale + np.asarray(beta)
    return w, b


def _exponent(maxabs: float) -> int:
    """Smallest e with maxabs < 2**e."""
    if maxabs <= 0:
        return 0
    return int(math.floor(math.log2(maxabs))) + 1


def quantize_export(model: FloatModel, calibration: Optional[np.ndarray] = None,
                    masks: Optional[dict] = None, input_scale: int = 0) -> ModelSpec:
    """Q15 ModelSpec with per-layer power-of-two scales.

    Weight exponents cover max |w| and keep each bias inside the int32
    accumulator; activation exponents cover the largest value seen on
    ``calibration`` inputs (a float forward pass).
    """
    act_max = {}
    if calibration is not None and len(calibration):
        a = calibration.astype(np.float64)
        for l in model.layers:
            sub = FloatModel([l], a.shape[1:], model.name, model.n_classes)
            a = forward(sub, a)
            if l.kind in MAC_KINDS:
                act_max[l.id] = float(np.abs(a).max())
    layers = []
    scale_in = input_scale
    for l in model.layers:
        if l.kind not in MAC_KINDS:
            layers.append(LayerSpec(l.kind, l.dims, l.id, name=l.name))
            continue
        w, b = l.weights, l.bias
        if l.bn is not None:
            w, b = fold_batchnorm(w, b, l.bn)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ExportError(f"layer {l.id}: non-finite parameters")
        e_w = _exponent(float(np.abs(w).max()))
        # bias lives in Q30 at (input scale + weight scale) and must fit int32
        bmax = float(np.abs(b).max()) if b.size else 0.0
        if bmax > 0:
            e_w = max(e_w, _exponent(bmax) - 1 - scale_in)
        if l.id in act_max:
            # the int32 accumulator must also hold the largest pre-activation, with 2x headroom
            e_w = max(e_w, _exponent(2.0 * act_max[l.id]) - 1 - scale_in)
        if not -127 <= e_w <= 127:
            raise ExportError(f"layer {l.id}: weight exponent {e_w} does not fit in i8")
        qw = quantize_values(w, e_w)
        frac = 30 - scale_in - e_w
        qb = np.sign(b) * np.floor(np.abs(b) * 2.0 ** frac + 0.5)
        if np.any(np.abs(qb) > 2 ** 31 - 1):
            raise ExportError(f"layer {l.id}: bias overflows the accumulator")
        out_scale = _exponent(act_max.get(l.id, 1.0)) if l.id in act_max else max(e_w, 0) + 4
        mask = masks.get(l.id) if masks else None
        layers.append(LayerSpec(l.kind, l.dims, l.id, QTensor(l.dims, qw, e_w), qb.astype(np.int64),
                                mask, out_scale, l.patterned, l.name, l.pattern_target, l.pattern_geometry))
        scale_in = out_scale
    return ModelSpec(layers, model.input_shape, model.name, input_scale).validate()


def quantized_accuracy(qmodel: ModelSpec, x: np.ndarray, y: np.ndarray,
                       mode: InferenceMode = InferenceMode.FULL) -> float:
    from ember.model import infer_continuous

    if len(x) == 0:
        return 0.0
    hits = 0
    for xi, yi in zip(x, y):
        q = QTensor(xi.shape, quantize_values(xi, qmodel.input_scale), qmodel.input_scale)
        hits += int(infer_continuous(qmodel, q, mode).predicted_class == yi)
    return hits / len(x)


# --------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineConfig:
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    phase1: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.02, epochs=6, phase="phase1"))
    phase2: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.02, epochs=6, phase="phase2"))
    library_size: int = 10
    calibration_samples: int = 500
    skip_finetune: bool = False
    quantized_eval_samples: Optional[int] = None


@dataclass
class PipelineResult:
    float_model: FloatModel
    qmodel: ModelSpec
    library: PatternLibrary
    accuracies: dict
    log: list
    # pre-phase-2 weights, kept so callers can check the active set stayed fixed
    phase1_model: Optional[FloatModel] = None


def run_pipeline(arch, data: Dataset, config: Optional[PipelineConfig] = None, seed: int = 0,
                 log_path=None) -> PipelineResult:
    """baseline -> prune -> phase 1 -> phase 2 -> export, recording the four
    accuracy checkpoints plus the quantized model's accuracy in both modes."""
    config = config or PipelineConfig()
    if isinstance(arch, str):
        arch = get_architecture(arch)
    log: list = []
    acc = {}
    stage = "baseline"
    try:
        fm = FloatModel.from_architecture(arch, seed)
        res = train_baseline(fm, data, dataclasses.replace(config.baseline, seed=seed), log)
        acc["baseline"] = res.accuracy
        stage = "prune"
        library = build_pattern_library(res.model, library_size=config.library_size)
        pruned, acc["pruned"] = apply_pattern_prune(res.model, library, data)
        model = pruned
        p1 = None
        if not config.skip_finetune:
            stage = "phase1"
            p1 = finetune_phase1(pruned, library, data, dataclasses.replace(config.phase1, seed=seed + 1), log)
            acc["phase1"] = p1.accuracy
            stage = "phase2"
            p2 = finetune_phase2(p1.model, library, data, dataclasses.replace(config.phase2, seed=seed + 2), log)
            masks = library.masks(p2.model)
            acc["phase2_full"] = p2.accuracy
            acc["phase2_low_energy"] = accuracy(p2.model, data.x_test, data.y_test, masks)
            model = p2.model
        stage = "export"
        masks = library.masks(model)
        qmodel = quantize_export(model, data.x_train[:config.calibration_samples], masks)
        xt, yt = data.x_test[:config.quantized_eval_samples], data.y_test[:config.quantized_eval_samples]
        acc["quantized_full"] = quantized_accuracy(qmodel, xt, yt, InferenceMode.FULL)
        acc["quantized_low_energy"] = quantized_accuracy(qmodel, xt, yt, InferenceMode.LOW_ENERGY)
    except TrainingError:
        raise
    except Exception as exc:
        raise TrainingError(f"{stage}: {exc}", stage=stage) from exc
    for k, v in acc.items():
        log.append({"stage": "checkpoint", "name": k, "accuracy": v})
    if log_path is not None:
        write_log(log, log_path)
    return PipelineResult(model, qmodel, library, acc, log, p1.model if p1 is not None else None)


def write_log(records: list, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
