"""Reparameterized negative-ELBO objective f(w; n, eps) with oracle accounting.

z = T_w(eps) = mu + eps * sigma, and

    f(w; n, eps) = -k_n(T_w(eps)) - H(w).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .core import GradientVector, VariationalParams
from .models import Model

_HALF_LOG_2PI_E = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass
class OracleCounter:
    """Counts model-oracle evaluations (one per datum per call)."""

    grad_calls: int = 0
    hvp_calls: int = 0
    active: bool = True

    def add(self, grad: int = 0, hvp: int = 0):
        if self.active:
            self.grad_calls += int(grad)
            self.hvp_calls += int(hvp)

    @property
    def total(self) -> int:
        return self.grad_calls + self.hvp_calls

    def snapshot(self) -> tuple[int, int]:
        return self.grad_calls, self.hvp_calls

    @contextlib.contextmanager
    def paused(self):
        prev = self.active
        self.active = False
        try:
            yield self
        finally:
            self.active = prev


def entropy(w: VariationalParams) -> float:
    return float(w.log_sigma.sum() + w.d * _HALF_LOG_2PI_E)


def transform(w: VariationalParams, eps) -> np.ndarray:
    return w.mu + np.asarray(eps) * w.sigma


class ReparamObjective:
    """Per-datum reparameterized objective over a model.

    All ``*_batch`` methods take an index array ``idx`` (B,) and noise ``eps``
    that is either shared, shape (d,), or per-datum, shape (B, d). Every call to
    ``grad_k``/``hvp_k`` is charged to ``counter``.
    """

    def __init__(self, model: Model, counter: OracleCounter | None = None):
        self.model = model
        self.counter = counter if counter is not None else OracleCounter()

    @property
    def N(self) -> int:
        return self.model.N

    @property
    def d(self) -> int:
        return self.model.d

    def check_index(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= self.N):
            raise IndexError(f"datum index outside [0, {self.N})")
        return idx

    # --- counted oracles ----------------------------------------------------
    def grad_k(self, idx, Z):
        Z = np.atleast_2d(Z)
        self.counter.add(grad=Z.shape[0])
        return self.model.grad_k(idx, Z)

    def hvp_k(self, idx, Z, V):
        Z = np.atleast_2d(Z)
        self.counter.add(hvp=Z.shape[0])
        return self.model.hvp_k(idx, Z, np.atleast_2d(V))

    # --- values -------------------------------------------------------------
    def eval_f_batch(self, w: VariationalParams, idx, eps) -> np.ndarray:
        idx = self.check_index(idx)
        Z = np.broadcast_to(transform(w, eps), (idx.size, self.d))
        return -self.model.k(idx, Z) - entropy(w)

    def eval_f(self, w: VariationalParams, n: int, eps) -> float:
        return float(self.eval_f_batch(w, [n], eps)[0])

    # --- gradients ----------------------------------------------------------
    def grad_f_batch(self, w: VariationalParams, idx, eps) -> tuple[np.ndarray, np.ndarray]:
        """Per-datum gradient partitions, each of shape (B, d)."""
        idx = self.check_index(idx)
        eps = np.asarray(eps, dtype=np.float64)
        Z = np.broadcast_to(w.mu + eps * w.sigma, (idx.size, self.d))
        gk = self.grad_k(idx, Z)
        mu_part = -gk
        ls_part = -gk * (eps * w.sigma) - 1.0
        return mu_part, ls_part

    def grad_f(self, w: VariationalParams, n: int, eps) -> GradientVector:
        mu, ls = self.grad_f_batch(w, [n], eps)
        return GradientVector(mu[0], ls[0])

    def grad_f_full_epoch(self, w: VariationalParams, eps) -> GradientVector:
        mu, ls = self.grad_f_batch(w, np.arange(self.N), eps)
        return GradientVector(mu.mean(axis=0), ls.mean(axis=0))

    def grad_f_table_batch(self, mu_t, ls_t, idx, eps) -> tuple[np.ndarray, np.ndarray]:
        """Like ``grad_f_batch`` but each datum uses its own stored parameters."""
        idx = self.check_index(idx)
        eps = np.asarray(eps, dtype=np.float64)
        sig = np.exp(ls_t)
        Z = mu_t + eps * sig
        gk = self.grad_k(idx, Z)
        return -gk, -gk * (eps * sig) - 1.0
