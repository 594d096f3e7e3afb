"""Datasets, CSV ingestion, synthetic generators and minibatch scheduling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .core import RngStream


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    standardized: bool = False
    feature_names: list[str] | None = None
    label_name: str = "label"
    truth: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.features.shape[0]


def standardize(X: np.ndarray) -> np.ndarray:
    """Column z-scoring with population variance; constant columns are only centered."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    return (X - mean) / std


def load_csv(path, label_column: str = "label", standardize_features: bool = False) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rows)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header")
        li = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != li]
        feats, labels = [], []
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for i, cell in enumerate(row):
                cell = cell.strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: line {lineno}, column {header[i]!r}: non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ValueError(f"{path}: line {lineno}, column {header[i]!r}: missing value")
                vals.append(v)
            labels.append(vals.pop(li))
            feats.append(vals)
    X = np.array(feats, dtype=np.float64).reshape(len(feats), len(names))
    if standardize_features:
        X = standardize(X)
    y = np.array(labels)
    if np.all(y == np.round(y)):
        y = y.astype(np.int64)
    return Dataset(X, y, name=str(path), standardized=standardize_features,
                   feature_names=names, label_name=label_column)


def save_csv(dataset: Dataset, path):
    names = dataset.feature_names or [f"x{i}" for i in range(dataset.features.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow([*names, dataset.label_name])
        for x, y in zip(dataset.features, dataset.labels):
            out.writerow([*map(repr, x.tolist()), repr(y.item())])


def synth_logistic(N: int, p: int, seed: int) -> Dataset:
    gen = RngStream(seed, 11).generator()
    z = gen.standard_normal(p)
    X = gen.standard_normal((N, p))
    y = (gen.random(N) < expit(X @ z)).astype(np.int64)
    return Dataset(X, y, name=f"synth-logistic-{N}x{p}", truth={"z": z})


def synth_multiclass(N: int, p: int, K: int, seed: int) -> Dataset:
    gen = RngStream(seed, 12).generator()
    W = gen.standard_normal((p, K))
    X = gen.standard_normal((N, p))
    probs = softmax(X @ W, axis=1)
    y = (gen.random(N)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    return Dataset(X, np.minimum(y, K - 1), name=f"synth-multiclass-{N}x{p}x{K}", truth={"W": W})


def synth_bradley_terry(N: int, M: int, seed: int, scores=None) -> Dataset:
    """Random matches between distinct players; features are (player_a, player_b)."""
    if M < 2:
        raise ValueError("need at least two players")
    gen = RngStream(seed, 13).generator()
    theta = gen.standard_normal(M) if scores is None else np.asarray(scores, dtype=np.float64)
    a = gen.integers(M, size=N)
    b = (a + gen.integers(1, M, size=N)) % M
    y = (gen.random(N) < expit(theta[a] - theta[b])).astype(np.int64)
    return Dataset(np.stack([a, b], axis=1), y, name=f"synth-bt-{N}x{M}",
                   feature_names=["player_a", "player_b"], label_name="outcome", truth={"theta": theta})


def synth_linear_gaussian(N: int, d: int, tau: float, seed: int) -> Dataset:
    gen = RngStream(seed, 14).generator()
    z = gen.standard_normal(d)
    X = gen.standard_normal((N, d))
    y = X @ z + tau * gen.standard_normal(N)
    return Dataset(X, y, name=f"synth-linear-gaussian-{N}x{d}", label_name="target",
                   truth={"z": z, "tau": tau})


def synth_glm(N: int, D: int, K: int, loss: str, seed: int) -> Dataset:
    """Gaussian features with regression targets (K columns) or class labels."""
    gen = RngStream(seed, 15).generator()
    W = gen.standard_normal((K, D)) / np.sqrt(D)
    X = gen.standard_normal((N, D))
    if loss == "squared":
        Y = X @ W.T + 0.1 * gen.standard_normal((N, K))
    elif loss == "softmax":
        probs = softmax(3.0 * X @ W.T, axis=1)
        Y = np.minimum((gen.random(N)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), K - 1)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return Dataset(X, Y, name=f"synth-glm-{loss}-{N}x{D}x{K}", truth={"W": W})


class MinibatchSchedule:
    """Reshuffled-every-epoch batches of distinct indices.

    The permutation for epoch e is drawn from ``rng.child(e)`` so schedules are
    reproducible; the last batch of an epoch is short when |B| does not divide N.
    """

    def __init__(self, N: int, batch_size: int, rng: RngStream):
        if N < 1 or batch_size < 1:
            raise ValueError("N and batch size must be positive")
        self.N = N
        self.batch_size = min(batch_size, N)
        self.rng = rng
        self.epoch = 0
        self.cursor = 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        return self.rng.child(epoch).generator().permutation(self.N)

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.N / self.batch_size)

    def next_batch(self) -> np.ndarray:
        batch = self._perm[self.cursor:self.cursor + self.batch_size]
        self.cursor += batch.size
        if self.cursor >= self.N:
            self.epoch += 1
            self.cursor = 0
            self._perm = self._permutation(self.epoch)
        return batch


def next_batch(schedule: MinibatchSchedule) -> np.ndarray:
    return schedule.next_batch()
