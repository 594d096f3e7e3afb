"""Gradient estimators for the doubly-stochastic objective.

naive       grad f(w; n, eps)
cv          naive + per-datum Taylor control variate (mu only)
inc         naive + SAGA-style correction evaluated at the same eps (full pass)
ensemble    naive + beta * c_cv + (1 - beta) * c_inc
joint-saga  naive + G - grad f~(w^n; n, eps), G the running mean of closed-form
            expected surrogate gradients at the stored parameters
joint-svrg  the same control variate anchored at a periodic snapshot

Estimators are called with a batch of distinct indices and one noise draw and
return the batch-mean GradientVector. ``per_datum`` gives the unaveraged
(B, d) partitions and never mutates state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .core import GradientVector, RngStream, VariationalParams, draw_standard_normal
from .objective import OracleCounter, ReparamObjective  # noqa: F401  (re-export)
from .surrogate import expect_grad_surrogate_mu_batch, surrogate_noise_mu_batch


class ParamTable:
    """Stored per-datum parameters w^1..w^N and the running mean G.

    Each entry also keeps the closed-form expected surrogate mu-gradient
    evaluated when it was written, so G can be updated by difference without
    re-evaluating the model at the old anchor.
    """

    def __init__(self, N: int, d: int):
        self.N, self.d = N, d
        self.mu = np.zeros((N, d))
        self.log_sigma = np.zeros((N, d))
        self.expected = np.zeros((N, d))
        self.G = np.zeros(d)
        self.write_count = np.zeros(N, dtype=np.int64)
        self.initialized = False

    def entry(self, n: int) -> VariationalParams:
        return VariationalParams(self.mu[n], self.log_sigma[n])

    def assign(self, idx, w: VariationalParams):
        self.mu[idx] = w.mu
        self.log_sigma[idx] = w.log_sigma
        self.write_count[idx] += 1

    def refresh_expectations(self, obj: ReparamObjective):
        """Recompute every cached expectation and G from scratch (N gradient calls)."""
        self.expected = expect_grad_surrogate_mu_batch(obj, self.mu, np.arange(self.N))
        self.G = self.expected.mean(axis=0)
        self.initialized = True

    def recompute_G(self, obj: ReparamObjective) -> np.ndarray:
        """From-scratch E_n of the expected surrogate gradient at the stored anchors."""
        return expect_grad_surrogate_mu_batch(obj, self.mu, np.arange(self.N)).mean(axis=0)

    @classmethod
    def synced(cls, obj: ReparamObjective, w: VariationalParams) -> "ParamTable":
        table = cls(obj.N, obj.d)
        table.assign(np.arange(obj.N), w)
        table.refresh_expectations(obj)
        return table

    def copy(self) -> "ParamTable":
        out = ParamTable(self.N, self.d)
        out.mu, out.log_sigma = self.mu.copy(), self.log_sigma.copy()
        out.expected, out.G = self.expected.copy(), self.G.copy()
        out.write_count = self.write_count.copy()
        out.initialized = self.initialized
        return out


@dataclass
class SvrgState:
    update_frequency: int
    snapshot: VariationalParams | None = None
    snapshot_mean: np.ndarray | None = None
    steps_since_refresh: int = 0
    refreshes: int = 0

    def __post_init__(self):
        if self.update_frequency < 1:
            raise ValueError("SVRG update frequency K must be >= 1")


def _check_batch(batch, N: int) -> np.ndarray:
    batch = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    if batch.size == 0:
        raise ValueError("batch must be non-empty")
    if np.unique(batch).size != batch.size:
        raise ValueError("batch contains duplicate indices")
    if batch.min() < 0 or batch.max() >= N:
        raise IndexError(f"batch index outside [0, {N})")
    return batch


class Estimator:
    name = "base"
    needs_table = False

    def __init__(self, obj: ReparamObjective):
        self.obj = obj

    def per_datum(self, w: VariationalParams, idx, eps) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def update(self, w: VariationalParams, batch: np.ndarray):
        pass

    def __call__(self, w: VariationalParams, batch, eps, update: bool = True) -> GradientVector:
        batch = _check_batch(batch, self.obj.N)
        mu, ls = self.per_datum(w, batch, eps)
        if update:
            self.update(w, batch)
        return GradientVector(mu.mean(axis=0), ls.mean(axis=0))


class NaiveEstimator(Estimator):
    name = "naive"

    def per_datum(self, w, idx, eps):
        return self.obj.grad_f_batch(w, idx, eps)


class CVEstimator(Estimator):
    """Per-datum Taylor control variate anchored at the current w."""

    name = "cv"

    def per_datum(self, w, idx, eps):
        mu, ls = self.obj.grad_f_batch(w, idx, eps)
        return mu + self.control(w, idx, eps), ls

    def control(self, w, idx, eps):
        return surrogate_noise_mu_batch(self.obj, w.mu, w.log_sigma, idx, eps)


class IncEstimator(Estimator):
    """SAGA correction at the sampled eps; needs a full pass per distinct eps."""

    name = "inc"
    needs_table = True

    def __init__(self, obj, table: ParamTable):
        super().__init__(obj)
        self.table = table

    def _table_mean(self, eps) -> tuple[np.ndarray, np.ndarray]:
        """E_m grad f(w^m; m, eps) for one draw (d,) or a stack of draws (S, d)."""
        N, t = self.obj.N, self.table
        eps = np.atleast_2d(eps)
        out_mu, out_ls = [], []
        step = max(1, 200_000 // N)
        for s in range(0, eps.shape[0], step):
            e = eps[s:s + step]
            k = e.shape[0]
            mu, ls = self.obj.grad_f_table_batch(np.tile(t.mu, (k, 1)), np.tile(t.log_sigma, (k, 1)),
                                                 np.tile(np.arange(N), k), np.repeat(e, N, axis=0))
            out_mu.append(mu.reshape(k, N, -1).mean(axis=1))
            out_ls.append(ls.reshape(k, N, -1).mean(axis=1))
        return np.concatenate(out_mu), np.concatenate(out_ls)

    def control(self, w, idx, eps) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        eps = np.asarray(eps, dtype=np.float64)
        m_mu, m_ls = self._table_mean(eps)
        if eps.ndim == 1:
            m_mu, m_ls = m_mu[0], m_ls[0]
        s_mu, s_ls = self.obj.grad_f_table_batch(self.table.mu[idx], self.table.log_sigma[idx], idx, eps)
        return m_mu - s_mu, m_ls - s_ls

    def per_datum(self, w, idx, eps):
        mu, ls = self.obj.grad_f_batch(w, idx, eps)
        c_mu, c_ls = self.control(w, idx, eps)
        return mu + c_mu, ls + c_ls

    def update(self, w, batch):
        self.table.assign(batch, w)


class EnsembleEstimator(IncEstimator):
    """Convex combination of the cv and inc controls. O(N) per call."""

    name = "ensemble"

    def __init__(self, obj, table: ParamTable, beta: float):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie strictly between 0 and 1")
        super().__init__(obj, table)
        self.beta = float(beta)

    def per_datum(self, w, idx, eps):
        mu, ls = self.obj.grad_f_batch(w, idx, eps)
        cv = surrogate_noise_mu_batch(self.obj, w.mu, w.log_sigma, idx, eps)
        c_mu, c_ls = IncEstimator.control(self, w, idx, eps)
        b = self.beta
        return mu + b * cv + (1.0 - b) * c_mu, ls + (1.0 - b) * c_ls


class JointSagaEstimator(Estimator):
    """Joint control variate with a SAGA parameter table.

    Per datum: one base gradient, one HVP at the stored anchor, and one
    gradient at the current w to refresh the running mean.
    """

    name = "joint-saga"
    needs_table = True

    def __init__(self, obj, table: ParamTable):
        super().__init__(obj)
        self.table = table

    def control(self, idx, eps) -> np.ndarray:
        t = self.table
        if not t.initialized:
            raise RuntimeError("parameter table has not been initialized")
        direction = np.asarray(eps) * np.exp(t.log_sigma[idx])
        hv = self.obj.hvp_k(idx, t.mu[idx], direction)
        # G - grad f~(w^n; n, eps) = G - (expected_n - hv)
        return t.G - t.expected[idx] + hv

    def per_datum(self, w, idx, eps):
        mu, ls = self.obj.grad_f_batch(w, idx, eps)
        return mu + self.control(idx, eps), ls

    def update(self, w, batch):
        t = self.table
        new = expect_grad_surrogate_mu_batch(self.obj, w.mu, batch)
        t.G = t.G + (new - t.expected[batch]).sum(axis=0) / t.N
        t.expected[batch] = new
        t.assign(batch, w)


class JointSvrgEstimator(Estimator):
    """Joint control variate anchored at a snapshot refreshed every K steps."""

    name = "joint-svrg"

    def __init__(self, obj, update_frequency: int):
        super().__init__(obj)
        self.state = SvrgState(int(update_frequency))

    def refresh(self, w: VariationalParams):
        s = self.state
        s.snapshot = w
        s.snapshot_mean = expect_grad_surrogate_mu_batch(self.obj, w.mu, np.arange(self.obj.N)).mean(axis=0)
        s.steps_since_refresh = 0
        s.refreshes += 1

    def per_datum(self, w, idx, eps):
        s = self.state
        if s.snapshot is None:
            raise RuntimeError("SVRG snapshot has not been initialized")
        mu, ls = self.obj.grad_f_batch(w, idx, eps)
        anchor = s.snapshot
        direction = np.broadcast_to(np.asarray(eps) * anchor.sigma, (len(idx), self.obj.d))
        mu_t = np.broadcast_to(anchor.mu, (len(idx), self.obj.d))
        grad_surr = -(self.obj.grad_k(idx, mu_t) + self.obj.hvp_k(idx, mu_t, direction))
        return mu + s.snapshot_mean - grad_surr, ls

    def __call__(self, w, batch, eps, update: bool = True) -> GradientVector:
        s = self.state
        if update and (s.snapshot is None or s.steps_since_refresh >= s.update_frequency):
            self.refresh(w)
        out = super().__call__(w, batch, eps, update=update)
        if update:
            s.steps_since_refresh += 1
        return out


ESTIMATOR_NAMES = ("naive", "cv", "inc", "ensemble", "joint-saga", "joint-svrg")


def make_estimator(name: str, obj: ReparamObjective, table: ParamTable | None = None,
                   beta: float = 0.5, svrg_k: int | None = None) -> Estimator:
    if name == "naive":
        return NaiveEstimator(obj)
    if name == "cv":
        return CVEstimator(obj)
    if name == "inc":
        return IncEstimator(obj, table)
    if name == "ensemble":
        return EnsembleEstimator(obj, table, beta)
    if name == "joint-saga":
        return JointSagaEstimator(obj, table)
    if name == "joint-svrg":
        return JointSvrgEstimator(obj, svrg_k if svrg_k is not None else obj.N)
    raise ValueError(f"unknown estimator {name!r}")


# --- functional forms ---------------------------------------------------------

def g_naive(obj, w, n, eps) -> GradientVector:
    return NaiveEstimator(obj)(w, [n], eps)


def g_cv(obj, w, n, eps) -> GradientVector:
    return CVEstimator(obj)(w, [n], eps)


def g_inc(obj, w, n, eps, table: ParamTable) -> GradientVector:
    return IncEstimator(obj, table)(w, [n], eps, update=False)


def g_ensemble(obj, w, n, eps, beta: float, table: ParamTable) -> GradientVector:
    return EnsembleEstimator(obj, table, beta)(w, [n], eps, update=False)


def g_joint_saga(obj, w, batch, eps, table: ParamTable) -> GradientVector:
    return JointSagaEstimator(obj, table)(w, batch, eps)


# --- table initialization -------------------------------------------------------

def init_table(obj: ReparamObjective, w: VariationalParams, optimizer, schedule,
               eps_stream: RngStream, start_iteration: int = 0, callback=None):
    """One epoch of naive optimization that records w^n at each datum's visit.

    Returns ``(w, table, iterations)``; G is filled by one full pass afterwards.
    """
    if schedule.cursor != 0:
        raise RuntimeError("table initialization must start at an epoch boundary")
    # callback(iteration, w) fires after every step, e.g. for trace evaluation
    table = ParamTable(obj.N, obj.d)
    naive = NaiveEstimator(obj)
    it = start_iteration
    for _ in range(math.ceil(obj.N / schedule.batch_size)):
        batch = schedule.next_batch()
        eps = draw_standard_normal(eps_stream.child(it), obj.d)
        table.assign(batch, w)
        w = optimizer.step(w, naive(w, batch, eps))
        it += 1
        if callback is not None:
            callback(it, w)
    table.refresh_expectations(obj)
    return w, table, it - start_iteration


# --- checkpoints ----------------------------------------------------------------

def write_checkpoint(path, w: VariationalParams, table: ParamTable | None = None, meta: dict | None = None):
    """Flat CSV: one ``w`` row, optionally N ``entry`` rows and a ``G`` row."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["role", "index", "values"])
        for key, val in sorted((meta or {}).items()):
            out.writerow(["meta", key, val])
        out.writerow(["w", 0, *map(repr, w.flatten().tolist())])
        if table is not None:
            for n in range(table.N):
                row = np.concatenate([table.mu[n], table.log_sigma[n]])
                out.writerow(["entry", n, *map(repr, row.tolist())])
            out.writerow(["G", 0, *map(repr, table.G.tolist())])


@dataclass
class Checkpoint:
    w: VariationalParams
    entries: np.ndarray | None = None
    G: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def table(self, obj: ReparamObjective | None = None) -> ParamTable | None:
        if self.entries is None:
            return None
        N, two_d = self.entries.shape
        t = ParamTable(N, two_d // 2)
        t.mu[:] = self.entries[:, : two_d // 2]
        t.log_sigma[:] = self.entries[:, two_d // 2:]
        if obj is not None:
            t.refresh_expectations(obj)
        if self.G is not None:
            t.G = self.G.copy()
            t.initialized = True
        return t


def read_checkpoint(path) -> Checkpoint:
    w = None
    entries, G, meta = [], None, {}
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        for row in rows:
            role = row[0]
            if role == "meta":
                meta[row[1]] = row[2]
            elif role == "w":
                w = VariationalParams.unflatten(np.array(row[2:], dtype=np.float64))
            elif role == "entry":
                entries.append(np.array(row[2:], dtype=np.float64))
            elif role == "G":
                G = np.array(row[2:], dtype=np.float64)
    if w is None:
        raise ValueError(f"{path}: checkpoint has no parameter row")
    return Checkpoint(w, np.stack(entries) if entries else None, G, meta)
