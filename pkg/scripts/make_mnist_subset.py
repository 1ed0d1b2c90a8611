"""Write the 5000-image MNIST subset shipped with mlxtend as gzipped IDX files.

The output mirrors the layout of the official distribution (train-* and t10k-*),
with 400 train and 100 test images per class. Run once; the files live in
tests/data/mnist5k and are read by the regular IDX loader.
"""

import gzip
import struct
import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data


def write_idx(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + arr.tobytes())


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    X, y = mnist_data()
    X = X.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(20240101)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        train.extend(idx[:400])
        test.extend(idx[400:])
    train = rng.permutation(np.array(train))
    test = rng.permutation(np.array(test))
    write_idx(out / "train-images-idx3-ubyte.gz", X[train])
    write_idx(out / "train-labels-idx1-ubyte.gz", y[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", X[test])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", y[test])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/mnist5k")
