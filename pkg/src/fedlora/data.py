"""Synthetic classification data, Dirichlet label-skew partitioning and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng

SPLITS = ("pretrain", "train", "val", "test")
MAX_PARTITION_ATTEMPTS = 100


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    classes: int
    split: str = "train"

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise DataError(f"features must be a non-empty 2-D array, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DataError(f"labels shape {self.y.shape} does not match {self.X.shape[0]} rows")
        if np.any(self.y < 0) or np.any(self.y >= self.classes):
            raise DataError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.X)):
            raise DataError("features contain NaN or Inf")
        if self.split not in SPLITS:
            raise DataError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.classes, self.split)


@dataclass(frozen=True)
class PartitionPlan:
    shards: tuple[np.ndarray, ...]
    beta: float
    seed: int
    attempts: int = 1

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


def _sphere_points(count: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    pts = rng.standard_normal((count, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return radius * pts


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(n) % classes
    return rng.permutation(y)


def _check_sizes(classes: int, d: int, n: int):
    if classes < 2:
        raise DataError(f"classes must be >= 2, got {classes}")
    if d < classes:
        raise DataError(f"feature dimension d={d} must be >= classes={classes}")
    if n < 1:
        raise DataError(f"N must be >= 1, got {n}")


def sample_blobs(means: np.ndarray, n: int, rng: np.random.Generator, split: str = "train") -> Dataset:
    classes, d = means.shape
    y = _balanced_labels(n, classes, rng)
    X = means[y] + rng.standard_normal((n, d))
    return Dataset(X, y, classes, split)


def make_synthetic(classes: int, d: int, N: int, class_sep: float, seed: int) -> Dataset:
    """Unit-covariance Gaussian blobs whose means lie on a sphere of radius ``class_sep``."""
    _check_sizes(classes, d, N)
    if class_sep < 0:
        raise DataError(f"class_sep must be non-negative, got {class_sep}")
    rng = make_rng(seed)
    means = _sphere_points(classes, d, class_sep, rng)
    return sample_blobs(means, N, rng)


@dataclass(frozen=True)
class SyntheticTask:
    pretrain: Dataset
    train: Dataset
    val: Dataset
    test: Dataset


def make_task(classes: int, d: int, n_train: int, n_val: int, n_test: int, n_pretrain: int,
              class_sep: float, domain_shift: float, seed: int) -> SyntheticTask:
    """Pre-training split plus a shifted downstream task.

    The downstream class means are a blend of the pre-training means and
    fresh random directions, ``domain_shift`` in [0, 1] setting the blend, so
    a frozen base trained on ``pretrain`` needs adaptation downstream.
    """
    _check_sizes(classes, d, n_train)
    if not 0.0 <= domain_shift <= 1.0:
        raise DataError(f"domain_shift must lie in [0, 1], got {domain_shift}")
    rng = make_rng(seed)
    base = _sphere_points(classes, d, class_sep, rng)
    fresh = _sphere_points(classes, d, class_sep, rng)
    target = (1.0 - domain_shift) * base + domain_shift * fresh
    norms = np.linalg.norm(target, axis=1, keepdims=True)
    target = np.where(norms > 0, target / np.where(norms > 0, norms, 1.0) * class_sep, target)
    return SyntheticTask(
        pretrain=sample_blobs(base, n_pretrain, rng, "pretrain"),
        train=sample_blobs(target, n_train, rng, "train"),
        val=sample_blobs(target, n_val, rng, "val"),
        test=sample_blobs(target, n_test, rng, "test"),
    )


def dirichlet_partition(labels, K: int, beta: float, seed: int, min_shard: int = 1) -> PartitionPlan:
    """Per class, draw client proportions from Dir(beta) and deal indices out multinomially.

    Redraws (same stream) until every shard holds at least ``min_shard``
    samples, giving up after ``MAX_PARTITION_ATTEMPTS`` draws.
    """
    labels = np.asarray(labels)
    if beta <= 0:
        raise DataError(f"beta must be positive, got {beta}")
    if K < 1:
        raise DataError(f"K must be >= 1, got {K}")
    if K * max(min_shard, 1) > labels.shape[0]:
        raise DataError(f"{labels.shape[0]} samples cannot fill {K} shards of >= {min_shard}")
    rng = make_rng(seed)
    classes = np.unique(labels)
    for attempt in range(1, MAX_PARTITION_ATTEMPTS + 1):
        buckets = [[] for _ in range(K)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(K, beta))
            counts = rng.multinomial(idx.shape[0], props)
            start = 0
            for k, count in enumerate(counts):
                buckets[k].append(idx[start:start + count])
                start += count
        shards = tuple(np.sort(np.concatenate(b)).astype(np.int64) for b in buckets)
        if min(len(s) for s in shards) >= max(min_shard, 1):
            return PartitionPlan(shards=shards, beta=beta, seed=seed, attempts=attempt)
    raise DataError(
        f"could not give all {K} clients >= {min_shard} samples in "
        f"{MAX_PARTITION_ATTEMPTS} attempts at beta={beta}"
    )


def label_histogram(y, classes: int) -> np.ndarray:
    return np.bincount(np.asarray(y, dtype=np.int64), minlength=classes).astype(np.float64)


def label_entropy(y, classes: int) -> float:
    p = label_histogram(y, classes)
    p = p / p.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def js_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def load_csv(path, label_column: str, split_fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Read a headed CSV into standardized (train, val, test) datasets.

    Labels are mapped to ``0..C-1`` in sorted order of their string values.
    Standardization statistics come from the train split only.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        label_at = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_at]
        if not feature_names:
            raise DataError(f"{path}: no feature columns besides {label_column!r}")
        rows, raw_labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            feats = []
            for i, cell in enumerate(row):
                if i == label_at:
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{line_no}: non-numeric value {cell!r} in column {header[i]!r}"
                    ) from None
                if not math.isfinite(value):
                    raise DataError(f"{path}:{line_no}: non-finite value in column {header[i]!r}")
                feats.append(value)
            rows.append(feats)
            raw_labels.append(row[label_at].strip())
    if not rows:
        raise DataError(f"{path}: no data rows")

    names = sorted(set(raw_labels))
    if len(names) < 2:
        raise DataError(f"{path}: label column {label_column!r} needs at least 2 classes")
    index = {name: i for i, name in enumerate(names)}
    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray([index[v] for v in raw_labels], dtype=np.int64)

    n_train, n_val, _ = split_sizes(len(rows), split_fractions)
    order = make_rng(seed).permutation(len(rows))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    if n_train == 0:
        raise DataError(f"{path}: train split is empty")
    mean = X[parts[0]].mean(axis=0)
    std = X[parts[0]].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Xs = (X - mean) / std

    out = []
    for split, idx in zip(("train", "val", "test"), parts):
        if idx.size == 0:
            out.append(None)
        else:
            out.append(Dataset(Xs[idx], y[idx], len(names), split))
    return tuple(out)
