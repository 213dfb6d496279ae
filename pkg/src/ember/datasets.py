"""Dataset loading: MNIST IDX files, UCI HAR text files, and synthetic stand-ins.

All loaders return :class:`Dataset` with float32 inputs in [0, 1) shaped
(N, C, H, W) so a sample can be quantized to Q15 at scale 0 directly.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
HAR_LENGTH = 231
# largest float32 strictly below 1.0; keeps scaled inputs inside Q15 at scale 0
_BELOW_ONE = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    def __post_init__(self):
        for y in (self.y_train, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"{self.name}: labels outside 0..{self.n_classes - 1}")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValueError(f"{self.name}: inputs and labels differ in length")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def subset(self, n_train: Optional[int] = None, n_test: Optional[int] = None) -> "Dataset":
        return Dataset(self.name, self.x_train[:n_train], self.y_train[:n_train],
                       self.x_test[:n_test], self.y_test[:n_test], self.n_classes)


# --------------------------------------------------------------------------
# MNIST IDX


def _open_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Decode an IDX file (optionally gzipped) holding unsigned bytes."""
    path = Path(path)
    data = _open_maybe_gzip(path)
    if len(data) < 4:
        raise ValueError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ValueError(f"{path}: unexpected IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(dims))
    if len(data) - header != expected:
        raise ValueError(f"{path}: payload holds {len(data) - header} bytes, header promises {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{directory / stem}[.gz] not found")


def load_mnist(directory, n_train: Optional[int] = None, n_test: Optional[int] = None) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    xs = read_idx(_find(d, "train-images-idx3-ubyte"))
    ys = read_idx(_find(d, "train-labels-idx1-ubyte"))
    xt = read_idx(_find(d, "t10k-images-idx3-ubyte"))
    yt = read_idx(_find(d, "t10k-labels-idx1-ubyte"))

    def prep(x):
        return np.minimum(x.astype(np.float32) / 255.0, _BELOW_ONE)[:, None, :, :]

    return Dataset("mnist", prep(xs), ys.astype(np.int64), prep(xt), yt.astype(np.int64), 10).subset(n_train, n_test)


# --------------------------------------------------------------------------
# UCI HAR


def _har_split(d: Path, split: str):
    x = np.loadtxt(_find(d / split, f"X_{split}.txt"), dtype=np.float64, ndmin=2)
    y = np.loadtxt(_find(d / split, f"y_{split}.txt"), dtype=np.int64, ndmin=1) - 1
    if len(x) != len(y):
        raise ValueError(f"{d / split}: {len(x)} feature rows but {len(y)} labels")
    if x.shape[1] >= HAR_LENGTH:
        x = x[:, :HAR_LENGTH]
    else:
        x = np.pad(x, ((0, 0), (0, HAR_LENGTH - x.shape[1])))
    return x, y


def load_har(directory) -> Dataset:
    """UCI HAR feature files (``train/X_train.txt`` etc., labels 1..6).

    Features arrive in [-1, 1]; they are mapped to [0, 1) and cropped or
    zero-padded to the network's 231-sample input.
    """
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    xs, ys = _har_split(d, "train")
    xt, yt = _har_split(d, "test")

    def prep(x):
        v = np.clip((x + 1.0) / 2.0, 0.0, _BELOW_ONE).astype(np.float32)
        return v[:, None, None, :]

    return Dataset("har", prep(xs), ys, prep(xt), yt, 6)


# --------------------------------------------------------------------------
# synthetic stand-ins


def synthetic_har(n_train: int = 3000, n_test: int = 600, seed: int = 0, noise: float = 0.35) -> Dataset:
    """Six activity-like classes of 231-sample signals.

    Each class mixes two sinusoids with class-specific frequency, phase jitter
    and offset; noise keeps the classes overlapping.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(HAR_LENGTH) / HAR_LENGTH
    freqs = rng.uniform(2.0, 14.0, size=(6, 2))
    amps = rng.uniform(0.3, 1.0, size=(6, 2))
    offsets = rng.uniform(-0.3, 0.3, size=6)

    def draw(n):
        y = rng.integers(0, 6, size=n)
        phase = rng.uniform(0, 2 * np.pi, size=(n, 2))
        scale = rng.uniform(0.8, 1.2, size=(n, 1))
        sig = (amps[y, 0:1] * np.sin(2 * np.pi * freqs[y, 0:1] * t + phase[:, 0:1])
               + amps[y, 1:2] * np.sin(2 * np.pi * freqs[y, 1:2] * t + phase[:, 1:2])) * scale
        sig += offsets[y, None] + noise * rng.standard_normal((n, HAR_LENGTH))
        x = np.clip((sig / 4.0) + 0.5, 0.0, _BELOW_ONE).astype(np.float32)
        return x[:, None, None, :], y.astype(np.int64)

    xs, ys = draw(n_train)
    xt, yt = draw(n_test)
    return Dataset("har-synthetic", xs, ys, xt, yt, 6)


def synthetic_gtsrb(n_train: int = 4300, n_test: int = 860, seed: int = 0, noise: float = 0.25) -> Dataset:
    """43 classes of 3x12x20 images built from smooth random prototypes.

    Samples are a prototype shifted by up to one pixel, scaled in brightness,
    plus Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0, 1, size=(43, 3, 4, 5))
    protos = coarse.repeat(3, axis=2).repeat(4, axis=3)
    k = np.array([0.25, 0.5, 0.25])
    for axis in (2, 3):
        protos = np.apply_along_axis(lambda v: np.convolve(np.pad(v, 1, mode="edge"), k, "valid"), axis, protos)

    def draw(n):
        y = rng.integers(0, 43, size=n)
        x = protos[y].copy()
        dr, dc = rng.integers(-1, 2, size=(2, n))
        for i in range(n):
            x[i] = np.roll(x[i], (dr[i], dc[i]), axis=(1, 2))
        x *= rng.uniform(0.7, 1.1, size=(n, 1, 1, 1))
        x += noise * rng.standard_normal(x.shape)
        return np.clip(x, 0.0, _BELOW_ONE).astype(np.float32), y.astype(np.int64)

    xs, ys = draw(n_train)
    xt, yt = draw(n_test)
    return Dataset("gtsrb-synthetic", xs, ys, xt, yt, 43)


def load_dataset(name: str, path=None, seed: int = 0) -> Dataset:
    """``mnist`` and ``har`` read files from ``path``; ``har`` falls back to the
    synthetic set when no path is given, ``gtsrb`` is always synthetic."""
    if name == "mnist":
        if path is None:
            raise FileNotFoundError("mnist needs --data-dir pointing at IDX files")
        return load_mnist(path)
    if name == "har":
        return load_har(path) if path is not None else synthetic_har(seed=seed)
    if name == "gtsrb":
        return synthetic_gtsrb(seed=seed)
    raise ValueError(f"unknown dataset {name!r}")
