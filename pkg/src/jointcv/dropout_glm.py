"""Generalized linear models with Gaussian feature dropout.

    f(W; n, eps) = L(y_n, W (eps * x_n)),   eps ~ Normal(1, sigma_drop^2 I)

The surrogate is the second-order Taylor expansion of f in eps around eps = 1,
whose expectation is f(W; n, 1) + sigma_drop^2 / 2 * tr(hess_eps f(W; n, 1)).
For squared error f is quadratic in eps, so the surrogate is exact.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp, softmax

from .core import RngStream
from .objective import OracleCounter

LOSSES = ("squared", "softmax")


class DropoutGlmObjective:
    def __init__(self, features, targets, n_outputs: int, loss: str = "squared",
                 sigma_drop: float = 0.5, counter: OracleCounter | None = None):
        if loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        X = np.asarray(features, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("features must be (N, D)")
        self.X = X
        self.N, self.D = X.shape
        self.K = int(n_outputs)
        self.loss = loss
        self.sigma_drop = float(sigma_drop)
        if loss == "squared":
            Y = np.asarray(targets, dtype=np.float64).reshape(self.N, -1)
            if Y.shape[1] != self.K:
                raise ValueError(f"squared-error targets must have {self.K} columns")
            self.Y = Y
        else:
            y = np.asarray(targets).astype(np.int64).reshape(-1)
            if y.shape != (self.N,) or y.min() < 0 or y.max() >= self.K:
                raise ValueError(f"class labels must be N integers in 0..{self.K - 1}")
            self.Y = np.eye(self.K)[y]
        self.counter = counter if counter is not None else OracleCounter()

    @property
    def shape(self) -> tuple[int, int]:
        return self.K, self.D

    def _check(self, W, idx):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= self.N):
            raise IndexError(f"datum index outside [0, {self.N})")
        W = np.asarray(W, dtype=np.float64)
        if W.shape[-2:] != self.shape:
            raise ValueError(f"weights must have shape {self.shape}, got {W.shape}")
        return W, idx

    def sample_noise(self, rng: RngStream, size=None) -> np.ndarray:
        shape = (self.D,) if size is None else (size, self.D)
        return 1.0 + self.sigma_drop * rng.generator().standard_normal(shape)

    # --- loss pieces on predictions -----------------------------------------
    def _loss(self, A, Yb):
        if self.loss == "squared":
            r = A - Yb
            return 0.5 * np.einsum("bk,bk->b", r, r)
        return logsumexp(A, axis=1) - np.einsum("bk,bk->b", A, Yb)

    def _pred(self, W, U):
        if W.ndim == 2:
            return U @ W.T
        return np.einsum("bkd,bd->bk", W, U)

    # --- objective ----------------------------------------------------------
    def f_batch(self, W, idx, eps) -> np.ndarray:
        W, idx = self._check(W, idx)
        U = np.asarray(eps) * self.X[idx]
        return self._loss(self._pred(W, U), self.Y[idx])

    def glm_f(self, W, n: int, eps) -> float:
        return float(self.f_batch(W, [n], eps)[0])

    def grad_f_batch(self, W, idx, eps) -> np.ndarray:
        """Per-datum gradients in W, shape (B, K, D). One gradient call per datum."""
        W, idx = self._check(W, idx)
        U = np.asarray(eps) * self.X[idx]
        U = np.broadcast_to(U, (idx.size, self.D))
        A = self._pred(W, U)
        if self.loss == "squared":
            ga = A - self.Y[idx]
        else:
            ga = softmax(A, axis=1) - self.Y[idx]
        self.counter.add(grad=idx.size)
        return ga[:, :, None] * U[:, None, :]

    # --- surrogate ----------------------------------------------------------
    def surrogate_grad_batch(self, W, idx, eps) -> np.ndarray:
        """W-gradient of the eps-Taylor surrogate at noise eps, shape (B, K, D).

        Charged as one HVP per datum.
        """
        W, idx = self._check(W, idx)
        X = self.X[idx]
        U = np.broadcast_to((np.asarray(eps) - 1.0) * X, (idx.size, self.D))
        A = self._pred(W, X)
        b = self._pred(W, U)
        self.counter.add(hvp=idx.size)
        XE = X + U
        if self.loss == "squared":
            return (A - self.Y[idx] + b)[:, :, None] * XE[:, None, :]
        p = softmax(A, axis=1)
        ga = p - self.Y[idx]
        hb = p * b - p * np.sum(p * b, axis=1, keepdims=True)
        r = 0.5 * b * b - np.sum(p * b, axis=1, keepdims=True) * b
        hr = p * r - p * np.sum(p * r, axis=1, keepdims=True)
        return (ga + hb)[:, :, None] * XE[:, None, :] + hr[:, :, None] * X[:, None, :]

    def trace_term_batch(self, W, idx) -> np.ndarray:
        """sigma^2/2 * tr(hess_eps f(W; n, 1)) per datum."""
        W, idx = self._check(W, idx)
        X = self.X[idx]
        x2 = X * X
        Wb = np.broadcast_to(W, (idx.size, self.K, self.D))
        if self.loss == "squared":
            tr = np.einsum("bd,bkd->b", x2, Wb * Wb)
        else:
            p = softmax(self._pred(W, X), axis=1)
            c = np.einsum("bk,bkd->bd", p, Wb)
            tr = np.einsum("bd,bk,bkd->b", x2, p, Wb * Wb) - np.einsum("bd,bd->b", x2, c * c)
        return 0.5 * self.sigma_drop ** 2 * tr

    def expect_surrogate_batch(self, W, idx) -> np.ndarray:
        """Per-datum closed-form E_eps f~(W; n, eps)."""
        W, idx = self._check(W, idx)
        return self.f_batch(W, idx, 1.0) + self.trace_term_batch(W, idx)

    def expect_surrogate_grad_batch(self, W, idx) -> np.ndarray:
        """W-gradient of the closed-form surrogate expectation, (B, K, D). One gradient call per datum."""
        W, idx = self._check(W, idx)
        X = self.X[idx]
        x2 = X * X
        Wb = np.broadcast_to(W, (idx.size, self.K, self.D))
        A = self._pred(W, X)
        s2 = self.sigma_drop ** 2
        self.counter.add(grad=idx.size)
        if self.loss == "squared":
            return (A - self.Y[idx])[:, :, None] * X[:, None, :] + s2 * Wb * x2[:, None, :]
        p = softmax(A, axis=1)
        ga = p - self.Y[idx]
        c = np.einsum("bk,bkd->bd", p, Wb)
        direct = 2.0 * x2[:, None, :] * p[:, :, None] * (Wb - c[:, None, :])
        t = np.einsum("bd,bkd->bk", x2, Wb * Wb) - 2.0 * np.einsum("bd,bd,bkd->bk", x2, c, Wb)
        via_p = p * (t - np.sum(p * t, axis=1, keepdims=True))
        trace_grad = direct + via_p[:, :, None] * X[:, None, :]
        return ga[:, :, None] * X[:, None, :] + 0.5 * s2 * trace_grad

    def full_objective(self, W, S: int, rng: RngStream) -> float:
        """E_n E_eps f(W; n, eps) by S shared noise draws over the full dataset."""
        eps = self.sample_noise(rng, S)
        total = 0.0
        for e in eps:
            total += float(self.f_batch(W, np.arange(self.N), e).mean())
        return total / S


def glm_surrogate_expectation(obj: DropoutGlmObjective, W, n: int) -> tuple[float, np.ndarray]:
    return float(obj.expect_surrogate_batch(W, [n])[0]), obj.expect_surrogate_grad_batch(W, [n])[0]


class GlmTable:
    """Stored weight matrices with cached surrogate expected gradients and their mean G."""

    def __init__(self, N: int, K: int, D: int):
        self.W = np.zeros((N, K, D))
        self.expected = np.zeros((N, K, D))
        self.G = np.zeros((K, D))
        self.N = N
        self.initialized = False

    def refresh(self, obj: DropoutGlmObjective):
        self.expected = obj.expect_surrogate_grad_batch(self.W, np.arange(self.N))
        self.G = self.expected.mean(axis=0)
        self.initialized = True

    def recompute_G(self, obj: DropoutGlmObjective) -> np.ndarray:
        return obj.expect_surrogate_grad_batch(self.W, np.arange(self.N)).mean(axis=0)

    @classmethod
    def synced(cls, obj: DropoutGlmObjective, W) -> "GlmTable":
        t = cls(obj.N, obj.K, obj.D)
        t.W[:] = W
        t.refresh(obj)
        return t


def _batch(batch, N):
    batch = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    if batch.size == 0:
        raise ValueError("batch must be non-empty")
    if np.unique(batch).size != batch.size:
        raise ValueError("batch contains duplicate indices")
    return batch


class GlmEstimator:
    name = "naive"
    needs_table = False

    def __init__(self, obj: DropoutGlmObjective):
        self.obj = obj

    def per_datum(self, W, idx, eps):
        return self.obj.grad_f_batch(W, idx, eps)

    def update(self, W, batch):
        pass

    def __call__(self, W, batch, eps, update: bool = True) -> np.ndarray:
        batch = _batch(batch, self.obj.N)
        g = self.per_datum(W, batch, eps)
        if update:
            self.update(W, batch)
        return g.mean(axis=0)


class GlmCVEstimator(GlmEstimator):
    name = "cv"

    def per_datum(self, W, idx, eps):
        g = self.obj.grad_f_batch(W, idx, eps)
        return g + self.obj.expect_surrogate_grad_batch(W, idx) - self.obj.surrogate_grad_batch(W, idx, eps)


class GlmJointEstimator(GlmEstimator):
    name = "joint-saga"
    needs_table = True

    def __init__(self, obj: DropoutGlmObjective, table: GlmTable):
        super().__init__(obj)
        self.table = table

    def control(self, idx, eps):
        if not self.table.initialized:
            raise RuntimeError("parameter table has not been initialized")
        return self.table.G - self.obj.surrogate_grad_batch(self.table.W[idx], idx, eps)

    def per_datum(self, W, idx, eps):
        return self.obj.grad_f_batch(W, idx, eps) + self.control(idx, eps)

    def update(self, W, batch):
        t = self.table
        new = self.obj.expect_surrogate_grad_batch(W, batch)
        t.G = t.G + (new - t.expected[batch]).sum(axis=0) / t.N
        t.expected[batch] = new
        t.W[batch] = W


def glm_joint_estimator(obj, W, batch, eps, table: GlmTable) -> np.ndarray:
    return GlmJointEstimator(obj, table)(W, batch, eps)


def init_glm_table(obj: DropoutGlmObjective, W, optimizer, schedule, eps_stream: RngStream,
                   start_iteration: int = 0, callback=None):
    """One naive epoch recording W^n at each visit, then a full pass for G."""
    if schedule.cursor != 0:
        raise RuntimeError("table initialization must start at an epoch boundary")
    # callback(iteration, w) fires after every step, e.g. for trace evaluation
    table = GlmTable(obj.N, obj.K, obj.D)
    naive = GlmEstimator(obj)
    it = start_iteration
    for _ in range(math.ceil(obj.N / schedule.batch_size)):
        batch = schedule.next_batch()
        eps = obj.sample_noise(eps_stream.child(it))
        table.W[batch] = W
        W = optimizer.step(W, naive(W, batch, eps))
        it += 1
        if callback is not None:
            callback(it, W)
    table.refresh(obj)
    return W, table, it - start_iteration
