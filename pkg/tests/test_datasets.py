import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from ember.arch import random_model
from ember.datasets import (
    HAR_LENGTH,
    Dataset,
    load_dataset,
    load_har,
    load_mnist,
    read_idx,
    synthetic_gtsrb,
    synthetic_har,
)

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


def _idx_bytes(arr, magic):
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()


def test_idx_reader_plain_and_gzip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    raw = _idx_bytes(arr, 0x803)
    (tmp_path / "a").write_bytes(raw)
    (tmp_path / "a.gz").write_bytes(gzip.compress(raw))
    assert np.array_equal(read_idx(tmp_path / "a"), arr)
    assert np.array_equal(read_idx(tmp_path / "a.gz"), arr)


def test_idx_reader_rejects_bad_files(tmp_path):
    arr = np.zeros(5, dtype=np.uint8)
    path = tmp_path / "x"
    path.write_bytes(_idx_bytes(arr, 0x801)[:-1])
    with pytest.raises(ValueError, match="header promises"):
        read_idx(path)
    path.write_bytes(_idx_bytes(arr, 0x901))
    with pytest.raises(ValueError, match="magic"):
        read_idx(path)
    path.write_bytes(b"\x00")
    with pytest.raises(ValueError):
        read_idx(path)


def test_bundled_mnist_subset_loads():
    data = load_mnist(MNIST_DIR)
    assert data.x_train.shape == (4000, 1, 28, 28) and data.x_test.shape == (1000, 1, 28, 28)
    assert data.x_train.dtype == np.float32
    assert data.x_train.min() >= 0.0 and data.x_train.max() < 1.0
    assert set(np.unique(data.y_train)) == set(range(10))
    small = load_mnist(MNIST_DIR, 100, 20)
    assert len(small.x_train) == 100 and len(small.y_test) == 20


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path / "nope")
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_dataset("mnist")
    with pytest.raises(ValueError):
        load_dataset("cifar")


def _write_har(root, n, width, labels_off=0):
    for split in ("train", "test"):
        d = root / split
        d.mkdir(parents=True)
        rng = np.random.default_rng(len(split))
        np.savetxt(d / f"X_{split}.txt", rng.uniform(-1, 1, size=(n, width)))
        np.savetxt(d / f"y_{split}.txt", rng.integers(1, 7, size=n + labels_off), fmt="%d")


@pytest.mark.parametrize("width", [561, 100])
def test_har_text_files(tmp_path, width):
    _write_har(tmp_path, 12, width)
    data = load_har(tmp_path)
    assert data.x_train.shape == (12, 1, 1, HAR_LENGTH)
    assert data.y_train.min() >= 0 and data.y_train.max() <= 5
    assert 0.0 <= data.x_test.min() and data.x_test.max() < 1.0
    if width < HAR_LENGTH:
        # padding is a raw feature of 0, the middle of the [-1, 1] range
        assert np.all(data.x_train[:, 0, 0, width:] == 0.5)


def test_har_label_count_mismatch(tmp_path):
    _write_har(tmp_path, 5, 561, labels_off=1)
    with pytest.raises(ValueError):
        load_har(tmp_path)


def test_synthetic_sets_fit_their_architectures():
    for data, arch in ((synthetic_har(60, 12), "table1-har"), (synthetic_gtsrb(86, 43), "table1-gtsrb")):
        assert data.input_shape == random_model(arch, 0).input_shape
        assert data.x_train.min() >= 0.0 and data.x_train.max() < 1.0
    assert synthetic_gtsrb(10, 5).n_classes == 43


def test_synthetic_sets_are_seeded():
    a, b = synthetic_har(20, 5, seed=3), synthetic_har(20, 5, seed=3)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.x_train, synthetic_har(20, 5, seed=4).x_train)


def test_dataset_validation():
    x = np.zeros((3, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        Dataset("d", x, np.array([0, 1, 5]), x, np.array([0, 0, 0]), 3)
    with pytest.raises(ValueError):
        Dataset("d", x, np.array([0, 1]), x, np.array([0, 0, 0]), 3)
