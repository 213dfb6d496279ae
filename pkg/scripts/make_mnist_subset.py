"""Write the 5,000-sample MNIST subset bundled with mlxtend as gzipped IDX files.

The sandbox has no route to the MNIST mirrors, but mlxtend ships 500 real
training digits per class.  The output layout is the standard one, so the
same loader reads either this subset or the full distribution:

    python scripts/make_mnist_subset.py data/mnist5k
"""

import argparse
import gzip
import struct
from pathlib import Path

import numpy as np


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    # fixed mtime keeps the archive bytes reproducible
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(header + array.tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--test-fraction", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    y = y.astype(np.uint8)

    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(y))
    n_test = int(round(len(y) * args.test_fraction))
    test, train = order[:n_test], order[n_test:]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", X[train])
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", y[train])
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", X[test])
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", y[test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out_dir}")


if __name__ == "__main__":
    main()
