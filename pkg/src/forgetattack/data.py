"""Synthetic blob datasets, index splits and the binary dataset format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError

DATASET_MAGIC = b"UUAD"
DATASET_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ConfigError(f"features {X.shape} do not match {y.size} labels")
        if y.size < 1:
            raise ConfigError("dataset must hold at least one sample")
        if y.min() < 0 or y.max() >= self.class_count:
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(X)):
            raise ConfigError("features must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.class_count == other.class_count
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    adversary: np.ndarray
    holdout: np.ndarray
    victims: np.ndarray
    test: np.ndarray

    def check(self, n: int) -> None:
        parts = [self.train, self.holdout, self.victims, self.test]
        allidx = np.concatenate(parts)
        if len(np.unique(allidx)) != len(allidx) or len(allidx) != n:
            raise ConfigError("split index sets must partition the dataset")
        if not np.isin(self.adversary, self.train).all():
            raise ConfigError("adversary set must be a subset of train")


def gen_blobs(n: int, d: int, classes: int, spread: float, seed: int) -> Dataset:
    """Unit-variance Gaussian clusters around random means of norm ``spread``."""
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    if classes < 1 or n < classes:
        raise ConfigError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    if spread <= 0:
        raise ConfigError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, d))
    means *= spread / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % classes)
    X = means[labels] + rng.standard_normal((n, d))
    return Dataset(X, labels, classes)


DEFAULT_FRACTIONS = {"train": 0.6, "holdout": 0.2, "test": 0.2}


def split(
    ds: Dataset,
    fractions: Mapping[str, float] = DEFAULT_FRACTIONS,
    adversary_fraction: float = 0.25,
    victim_count: int = 20,
    seed: int = 0,
) -> Splits:
    """Random train/holdout/test partition; victims are carved out of test."""
    keys = ("train", "holdout", "test")
    if set(fractions) != set(keys):
        raise ConfigError(f"fractions must have keys {keys}")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigError("fractions must sum to 1")
    if not 0.0 <= adversary_fraction <= 1.0:
        raise ConfigError("adversary_fraction must be in [0, 1]")
    n = len(ds)
    n_train = int(round(fractions["train"] * n))
    n_hold = int(round(fractions["holdout"] * n))
    n_test = n - n_train - n_hold
    if min(n_train, n_hold, n_test) < 0 or n_train < 1:
        raise ConfigError(f"fractions {dict(fractions)} impossible for n={n}")
    if not 0 <= victim_count <= n_test:
        raise ConfigError(f"victim_count={victim_count} exceeds test size {n_test}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    train = np.sort(perm[:n_train])
    holdout = np.sort(perm[n_train : n_train + n_hold])
    test_pool = perm[n_train + n_hold :]
    victims = np.sort(rng.choice(test_pool, size=victim_count, replace=False))
    test = np.sort(np.setdiff1d(test_pool, victims))
    n_adv = int(round(adversary_fraction * n_train))
    adversary = np.sort(rng.choice(train, size=n_adv, replace=False))
    out = Splits(train, adversary, holdout, victims, test)
    out.check(n)
    return out


# binary format: "UUAD" | u32 version | u32 n | u32 d | u32 C | f32 features | u32 labels


def write_dataset(path, ds: Dataset) -> None:
    n, d = ds.features.shape
    buf = bytearray(DATASET_MAGIC)
    buf += struct.pack("<IIII", DATASET_VERSION, n, d, ds.class_count)
    buf += ds.features.astype("<f4").tobytes()
    buf += ds.labels.astype("<u4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise FormatError("bad dataset magic", 0)
    if len(raw) < 20:
        raise FormatError("truncated header", len(raw))
    version, n, d, C = struct.unpack_from("<IIII", raw, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    need = 20 + 4 * n * d + 4 * n
    if len(raw) < need:
        raise FormatError(f"truncated payload, expected {need} bytes", len(raw))
    if len(raw) > need:
        raise FormatError("trailing bytes after payload", need)
    X = np.frombuffer(raw, dtype="<f4", count=n * d, offset=20).reshape(n, d)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=20 + 4 * n * d)
    if n and y.max() >= C:
        bad = int(np.argmax(y >= C))
        raise FormatError(f"label {y[bad]} >= class count {C}", 20 + 4 * n * d + 4 * bad)
    return Dataset(X.astype(np.float64), y.astype(np.int64), C)


def dataset_io(path, ds: Dataset | None = None):
    """Write ``ds`` to ``path`` when given, otherwise read and return it."""
    if ds is None:
        return read_dataset(path)
    write_dataset(path, ds)
    return None


def read_csv(path, class_count: int | None = None) -> Dataset:
    """Header ``f0,...,f{d-1},label``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], [r for r in rows[1:] if r]
    d = len(header) - 1
    if header != [f"f{i}" for i in range(d)] + ["label"]:
        raise ConfigError(f"unexpected CSV header {header}")
    X = np.array([[float(v) for v in r[:d]] for r in body])
    y = np.array([int(r[d]) for r in body])
    return Dataset(X, y, class_count or int(y.max()) + 1)


def write_csv(path, ds: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
