"""Step rules: SGD, Adam, and SMISO (which owns its own estimator)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GradientVector, VariationalParams
from .objective import ReparamObjective


def _flat(x):
    if isinstance(x, (VariationalParams, GradientVector)):
        return x.flatten()
    return np.asarray(x, dtype=np.float64)


def _like(template, flat):
    if isinstance(template, VariationalParams):
        return VariationalParams.unflatten(flat)
    return flat.reshape(np.shape(template))


@dataclass
class SGD:
    step_size: float

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")

    def step(self, w, g):
        return _like(w, _flat(w) - self.step_size * _flat(g))


@dataclass
class Adam:
    step_size: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")

    def step(self, w, g):
        g = _flat(g)
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return _like(w, _flat(w) - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps))


def sgd_step(state: SGD, w, g):
    return state.step(w, g)


def adam_step(state: Adam, w, g):
    return state.step(w, g)


def make_optimizer(name: str, step_size: float):
    if name == "sgd":
        return SGD(step_size)
    if name == "adam":
        return Adam(step_size)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class SmisoState:
    """Exponentially averaged per-datum iterates and their mean w-bar.

    Entries and w-bar hold the flattened (mu, log_sigma) vector.
    """

    table: np.ndarray
    wbar: np.ndarray
    alpha: float = 0.9
    gamma: float = 1e-3
    steps: int = field(default=0)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def start(cls, w: VariationalParams, N: int, alpha: float = 0.9, gamma: float = 1e-3) -> "SmisoState":
        flat = w.flatten()
        return cls(np.tile(flat, (N, 1)), flat.copy(), alpha, gamma)

    @property
    def N(self) -> int:
        return self.table.shape[0]

    @property
    def w(self) -> VariationalParams:
        return VariationalParams.unflatten(self.wbar)


def smiso_step(state: SmisoState, batch, eps, obj: ReparamObjective) -> VariationalParams:
    """One SMISO iteration; gradients are taken at the current w-bar."""
    batch = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    if np.unique(batch).size != batch.size:
        raise ValueError("batch contains duplicate indices")
    wbar = VariationalParams.unflatten(state.wbar)
    mu, ls = obj.grad_f_batch(wbar, batch, eps)
    grads = np.concatenate([mu, ls], axis=1)
    old = state.table[batch]
    new = (1.0 - state.alpha) * old + state.alpha * (state.wbar - state.gamma * grads)
    state.table[batch] = new
    state.wbar = state.wbar + (new - old).sum(axis=0) / state.N
    state.steps += 1
    return VariationalParams.unflatten(state.wbar)


def smiso_effective_step(alpha: float, gamma: float, batch_size: int, N: int) -> float:
    """SGD step size matching a SMISO step: alpha * |B| * gamma / N."""
    return alpha * batch_size * gamma / N
