"""Dataset ingestion: MNIST (IDX), CIFAR-10 (binary batches) and a toy Gaussian task.

Every dataset is split 4:1 into train/val by a seeded shuffle of the
training pool and normalized per channel with train-split statistics.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..init_rng import Purpose, StreamKey, stream

DATA_ENV = "FROZEN_SLT_DATA"

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def input_shape(self):
        return self.x_train.shape[1:]

    @property
    def num_classes(self):
        return int(max(self.y_train.max(), self.y_val.max(), self.y_test.max())) + 1


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    path = Path(path)
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as e:
        raise DatasetError(f"{path}: cannot read ({e})") from e
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header at byte {len(raw)}")
    zero, code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: bad IDX magic at byte 0 (type code 0x{code:02x})")
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated dimension list at byte {len(raw)}")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    dtype = np.dtype(_IDX_DTYPES[code])
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise DatasetError(f"{path}: payload is {len(raw) - offset} bytes from byte {offset}, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DatasetError(f"missing file {root / stem}[.gz]")


def read_mnist(root):
    root = Path(root)
    x_tr = read_idx(_find(root, "train-images-idx3-ubyte"))
    y_tr = read_idx(_find(root, "train-labels-idx1-ubyte"))
    x_te = read_idx(_find(root, "t10k-images-idx3-ubyte"))
    y_te = read_idx(_find(root, "t10k-labels-idx1-ubyte"))
    for x, y, part in ((x_tr, y_tr, "train"), (x_te, y_te, "t10k")):
        if len(x) != len(y):
            raise DatasetError(f"MNIST {part}: {len(x)} images but {len(y)} labels")
        if y.size and y.max() > 9:
            raise DatasetError(f"MNIST {part}: label {int(y.max())} out of range")
    return x_tr[:, None].astype(np.float32) / 255.0, y_tr.astype(np.int64), \
        x_te[:, None].astype(np.float32) / 255.0, y_te.astype(np.int64)


_CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar10_batch(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % _CIFAR_RECORD:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DatasetError(f"{path}: label {int(labels[bad[0]])} out of range at byte {int(bad[0]) * _CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0, labels.astype(np.int64)


def read_cifar10(root):
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = []
    for k in range(1, 6):
        p = root / f"data_batch_{k}.bin"
        if not p.exists():
            raise DatasetError(f"missing file {p}")
        parts.append(read_cifar10_batch(p))
    test = root / "test_batch.bin"
    if not test.exists():
        raise DatasetError(f"missing file {test}")
    x_te, y_te = read_cifar10_batch(test)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), x_te, y_te


def toy_gaussians(seed=0, n_train=200, n_test=200, dim=2, offset=2.0):
    """Two isotropic unit Gaussians centred at +offset and -offset on every axis."""
    s = stream(StreamKey(seed, 1, Purpose.DATA))

    def draw(n):
        y = (s.uniform(n) < 0.5).astype(np.int64)
        x = s.normal(n * dim).reshape(n, dim) + np.where(y[:, None] == 1, offset, -offset)
        return x.astype(np.float32), y

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return x_tr, y_tr, x_te, y_te


def split_train_val(n: int, seed: int):
    """Seeded 4:1 split of range(n) into (train_idx, val_idx)."""
    perm = stream(StreamKey(seed, 0, Purpose.DATA_SPLIT)).permutation(n)
    n_val = n // 5
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _channel_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def make_dataset(name, x_pool, y_pool, x_test, y_test, seed, train_limit=None):
    tr, va = split_train_val(len(x_pool), seed)
    if train_limit is not None:
        tr = tr[:train_limit]
    x_tr, x_va = x_pool[tr], x_pool[va]
    axes = _channel_axes(x_tr)
    mean = x_tr.mean(axis=axes, dtype=np.float64).astype(np.float32)
    std = x_tr.std(axis=axes, dtype=np.float64).astype(np.float32)
    std = np.where(std > 0, std, np.float32(1.0))
    shape = (1, -1, 1, 1) if x_tr.ndim == 4 else (1, -1)

    def norm(x):
        return ((x - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)

    return Dataset(name, norm(x_tr), y_pool[tr], norm(x_va), y_pool[va], norm(x_test), y_test, mean, std)


def data_root(path=None) -> Path:
    if path:
        return Path(path)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    raise DatasetError(f"no dataset path given and ${DATA_ENV} is unset")


def load_dataset(name: str, path=None, seed: int = 0, train_limit=None) -> Dataset:
    name = name.lower()
    if name == "toy_gaussians":
        return make_dataset(name, *toy_gaussians(seed), seed, train_limit)
    if name == "mnist":
        return make_dataset(name, *read_mnist(data_root(path)), seed, train_limit)
    if name == "cifar10":
        return make_dataset(name, *read_cifar10(data_root(path)), seed, train_limit)
    raise DatasetError(f"unknown dataset {name!r}")
