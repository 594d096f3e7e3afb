"""Shared value types, trace-variance and the seeded random-stream contract."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} must have length >= 1")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """Mean and log-scale of a factorized Gaussian q_w(z)."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        mu = _as_vector(self.mu, "mu")
        log_sigma = _as_vector(self.log_sigma, "log_sigma")
        if mu.shape != log_sigma.shape:
            raise ValueError(f"mu has length {mu.size}, log_sigma has length {log_sigma.size}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", log_sigma)

    @property
    def d(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_sigma])

    @classmethod
    def unflatten(cls, vec) -> "VariationalParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size % 2:
            raise ValueError("flat parameter vector must be 1-d with even length")
        d = vec.size // 2
        return cls(vec[:d], vec[d:])

    @classmethod
    def standard(cls, d: int) -> "VariationalParams":
        return cls(np.zeros(d), np.zeros(d))

    def __eq__(self, other):
        if not isinstance(other, VariationalParams):
            return NotImplemented
        return np.array_equal(self.mu, other.mu) and np.array_equal(self.log_sigma, other.log_sigma)

    def __repr__(self):
        return f"VariationalParams(d={self.d}, mu={self.mu!r}, log_sigma={self.log_sigma!r})"


@dataclass(frozen=True, eq=False)
class GradientVector:
    """Gradient over w = (mu, log_sigma), kept as its two partitions."""

    mu_part: np.ndarray
    log_sigma_part: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu_part, dtype=np.float64).reshape(-1)
        ls = np.array(self.log_sigma_part, dtype=np.float64).reshape(-1)
        if mu.shape != ls.shape:
            raise ValueError("gradient partitions differ in length")
        mu.setflags(write=False)
        ls.setflags(write=False)
        object.__setattr__(self, "mu_part", mu)
        object.__setattr__(self, "log_sigma_part", ls)

    @property
    def d(self) -> int:
        return self.mu_part.size

    def flatten(self) -> np.ndarray:
        return flatten(self)

    @classmethod
    def unflatten(cls, vec) -> "GradientVector":
        return unflatten(vec)

    @classmethod
    def zeros(cls, d: int) -> "GradientVector":
        return cls(np.zeros(d), np.zeros(d))

    def __add__(self, other: "GradientVector") -> "GradientVector":
        return GradientVector(self.mu_part + other.mu_part, self.log_sigma_part + other.log_sigma_part)

    def __sub__(self, other: "GradientVector") -> "GradientVector":
        return GradientVector(self.mu_part - other.mu_part, self.log_sigma_part - other.log_sigma_part)

    def __mul__(self, scale: float) -> "GradientVector":
        return GradientVector(scale * self.mu_part, scale * self.log_sigma_part)

    __rmul__ = __mul__

    def __neg__(self) -> "GradientVector":
        return self * -1.0

    def sq_norm(self) -> float:
        return float(self.mu_part @ self.mu_part + self.log_sigma_part @ self.log_sigma_part)

    def __eq__(self, other):
        if not isinstance(other, GradientVector):
            return NotImplemented
        return np.array_equal(self.mu_part, other.mu_part) and np.array_equal(
            self.log_sigma_part, other.log_sigma_part
        )

    def __repr__(self):
        return f"GradientVector(mu_part={self.mu_part!r}, log_sigma_part={self.log_sigma_part!r})"


def flatten(g: GradientVector) -> np.ndarray:
    return np.concatenate([g.mu_part, g.log_sigma_part])


def unflatten(vec) -> GradientVector:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size % 2:
        raise ValueError("flat gradient must be 1-d with even length")
    d = vec.size // 2
    return GradientVector(vec[:d], vec[d:])


def trace_variance(samples, ddof: int = 1) -> float:
    """Sum over coordinates of the per-coordinate sample variance.

    ``samples`` is an (S, D) array, or a sequence of GradientVectors.
    """
    arr = _stack(samples)
    if arr.shape[0] <= ddof:
        raise ValueError(f"need more than {ddof} samples")
    return float(np.var(arr, axis=0, ddof=ddof).sum())


def trace_variance_se(samples) -> tuple[float, float]:
    """Unbiased trace-variance together with a standard error.

    The estimate is (S/(S-1)) * mean_s ||g_s - gbar||^2, so its standard error
    is taken from the spread of the squared deviations.
    """
    arr = _stack(samples)
    S = arr.shape[0]
    if S < 2:
        raise ValueError("need at least 2 samples")
    dev = arr - arr.mean(axis=0)
    q = np.einsum("ij,ij->i", dev, dev) * (S / (S - 1))
    return float(q.mean()), float(q.std(ddof=1) / np.sqrt(S))


def _stack(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        arr = samples
    else:
        samples = list(samples)
        if samples and isinstance(samples[0], GradientVector):
            arr = np.stack([flatten(g) for g in samples])
        else:
            arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


@dataclass(frozen=True)
class RngStream:
    """Deterministic, splittable random stream.

    Equal ``(seed, stream_id, path)`` always produces the same draws; children
    with distinct keys are independent (numpy ``SeedSequence`` spawn keys).
    """

    seed: int
    stream_id: int = 0
    path: tuple = field(default=())

    def child(self, key: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + (int(key),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) % 2**64, spawn_key=(int(self.stream_id),) + self.path)
        return np.random.Generator(np.random.PCG64(ss))


def draw_standard_normal(rng: RngStream, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be >= 1")
    return rng.generator().standard_normal(d)
