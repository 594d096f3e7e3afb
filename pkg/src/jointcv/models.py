"""Probabilistic models behind a batched per-datum contract.

Every model exposes, for index arrays ``idx`` of shape (B,) and latent arrays
``Z`` of shape (B, d):

    log_lik(idx, Z) -> (B,)
    grad_log_lik(idx, Z) -> (B, d)
    hvp_log_lik(idx, Z, V) -> (B, d)

plus a standard Gaussian prior. ``k``/``grad_k``/``hvp_k`` combine them into the
per-datum log-joint k_n(z) = N log p(x_n | z) + log p(z).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

_LOG_2PI = np.log(2.0 * np.pi)


class Model:
    N: int
    d: int

    # --- prior: standard Gaussian on z -------------------------------------
    def log_prior(self, Z):
        Z = np.atleast_2d(Z)
        return -0.5 * np.einsum("ij,ij->i", Z, Z) - 0.5 * self.d * _LOG_2PI

    def grad_log_prior(self, Z):
        return -np.atleast_2d(Z)

    def hvp_log_prior(self, Z, V):
        return -np.atleast_2d(V)

    # --- per-datum log-joint ------------------------------------------------
    def k(self, idx, Z):
        return self.N * self.log_lik(idx, Z) + self.log_prior(Z)

    def grad_k(self, idx, Z):
        return self.N * self.grad_log_lik(idx, Z) + self.grad_log_prior(Z)

    def hvp_k(self, idx, Z, V):
        return self.N * self.hvp_log_lik(idx, Z, V) + self.hvp_log_prior(Z, V)

    def log_joint(self, z) -> float:
        """Full-data log p(x, z)."""
        z = np.asarray(z, dtype=np.float64)
        idx = np.arange(self.N)
        Z = np.broadcast_to(z, (self.N, self.d))
        return float(self.log_lik(idx, Z).sum() + self.log_prior(z[None])[0])

    def grad_log_joint(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        idx = np.arange(self.N)
        Z = np.broadcast_to(z, (self.N, self.d))
        return self.grad_log_lik(idx, Z).sum(axis=0) + self.grad_log_prior(z[None])[0]


class LogisticRegressionModel(Model):
    """Binary Bayesian logistic regression, latent z = weight vector."""

    def __init__(self, features, labels):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be (N, p) and labels (N,)")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("binary labels must be 0 or 1")
        self.X = X
        self.y = y.astype(np.float64)
        self.N, self.d = X.shape

    def _logits(self, idx, Z):
        return np.einsum("ij,ij->i", self.X[idx], Z)

    def log_lik(self, idx, Z):
        a = self._logits(idx, Z)
        return self.y[idx] * a + log_expit(-a)

    def grad_log_lik(self, idx, Z):
        a = self._logits(idx, Z)
        return (self.y[idx] - expit(a))[:, None] * self.X[idx]

    def hvp_log_lik(self, idx, Z, V):
        a = self._logits(idx, Z)
        s = expit(a)
        Xb = self.X[idx]
        return -(s * (1.0 - s) * np.einsum("ij,ij->i", Xb, V))[:, None] * Xb


class MulticlassLogisticModel(Model):
    """Softmax regression; z is the row-major flattening of a (p, K) weight matrix."""

    def __init__(self, features, labels, n_classes: int | None = None):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels).astype(np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be (N, p) and labels (N,)")
        K = int(n_classes if n_classes is not None else y.max() + 1)
        if y.min() < 0 or y.max() >= K:
            raise ValueError(f"labels must lie in 0..{K - 1}")
        self.X, self.y, self.K = X, y, K
        self.N, self.p = X.shape
        self.d = self.p * K

    def _logits(self, idx, Z):
        return np.einsum("bp,bpk->bk", self.X[idx], Z.reshape(-1, self.p, self.K))

    def log_lik(self, idx, Z):
        a = self._logits(idx, Z)
        return a[np.arange(len(idx)), self.y[idx]] - logsumexp(a, axis=1)

    def grad_log_lik(self, idx, Z):
        p = softmax(self._logits(idx, Z), axis=1)
        resid = -p
        resid[np.arange(len(idx)), self.y[idx]] += 1.0
        return np.einsum("bp,bk->bpk", self.X[idx], resid).reshape(len(idx), self.d)

    def hvp_log_lik(self, idx, Z, V):
        p = softmax(self._logits(idx, Z), axis=1)
        Xb = self.X[idx]
        u = np.einsum("bp,bpk->bk", Xb, V.reshape(-1, self.p, self.K))
        # (diag(p) - p p^T) u
        hu = p * u - p * np.sum(p * u, axis=1, keepdims=True)
        return -np.einsum("bp,bk->bpk", Xb, hu).reshape(len(idx), self.d)


class BradleyTerryModel(Model):
    """Pairwise comparisons: y_n ~ Bernoulli(sigmoid(theta_a - theta_b))."""

    def __init__(self, matches, outcomes, n_players: int):
        m = np.asarray(matches).astype(np.int64)
        y = np.asarray(outcomes)
        if m.ndim != 2 or m.shape[1] != 2 or y.shape != (m.shape[0],):
            raise ValueError("matches must be (N, 2) and outcomes (N,)")
        if m.min() < 0 or m.max() >= n_players:
            raise ValueError(f"player indices must lie in [0, {n_players})")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("outcomes must be 0 or 1")
        self.a, self.b = m[:, 0], m[:, 1]
        self.y = y.astype(np.float64)
        self.N = m.shape[0]
        self.d = int(n_players)

    def _diff(self, idx, Z):
        rows = np.arange(len(idx))
        return Z[rows, self.a[idx]] - Z[rows, self.b[idx]]

    def log_lik(self, idx, Z):
        t = self._diff(idx, Z)
        return self.y[idx] * t + log_expit(-t)

    def _scatter(self, idx, coef):
        out = np.zeros((len(idx), self.d))
        rows = np.arange(len(idx))
        np.add.at(out, (rows, self.a[idx]), coef)
        np.add.at(out, (rows, self.b[idx]), -coef)
        return out

    def grad_log_lik(self, idx, Z):
        return self._scatter(idx, self.y[idx] - expit(self._diff(idx, Z)))

    def hvp_log_lik(self, idx, Z, V):
        s = expit(self._diff(idx, Z))
        return self._scatter(idx, -s * (1.0 - s) * self._diff(idx, V))


class LinearGaussianModel(Model):
    """y_n ~ Normal(x_n^T z, tau^2); k_n is exactly quadratic in z."""

    def __init__(self, features, targets, tau: float = 1.0):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(targets, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be (N, d) and targets (N,)")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.X, self.y, self.tau2 = X, y, float(tau) ** 2
        self.N, self.d = X.shape

    def log_lik(self, idx, Z):
        r = self.y[idx] - np.einsum("ij,ij->i", self.X[idx], Z)
        return -0.5 * np.log(2.0 * np.pi * self.tau2) - 0.5 * r * r / self.tau2

    def grad_log_lik(self, idx, Z):
        r = self.y[idx] - np.einsum("ij,ij->i", self.X[idx], Z)
        return (r / self.tau2)[:, None] * self.X[idx]

    def hvp_log_lik(self, idx, Z, V):
        Xb = self.X[idx]
        return -(np.einsum("ij,ij->i", Xb, V) / self.tau2)[:, None] * Xb

    def hessian_k(self, n: int) -> np.ndarray:
        """Constant Hessian of k_n (dense, for tests and closed-form checks)."""
        x = self.X[n]
        return -self.N * np.outer(x, x) / self.tau2 - np.eye(self.d)


# --- single-datum convenience wrappers --------------------------------------

def _check(model: Model, n: int, z) -> np.ndarray:
    if not 0 <= n < model.N:
        raise IndexError(f"datum index {n} outside [0, {model.N})")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.d,):
        raise ValueError(f"latent vector must have length {model.d}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent vector has non-finite entries")
    return z


def k_n(model: Model, n: int, z) -> float:
    z = _check(model, n, z)
    return float(model.k(np.array([n]), z[None])[0])


def grad_k_n(model: Model, n: int, z) -> np.ndarray:
    z = _check(model, n, z)
    return model.grad_k(np.array([n]), z[None])[0]


def hvp_k_n(model: Model, n: int, z, v) -> np.ndarray:
    z = _check(model, n, z)
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    return model.hvp_k(np.array([n]), z[None], v)[0]
