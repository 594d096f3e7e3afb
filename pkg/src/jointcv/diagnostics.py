"""Variance decomposition, estimator variance and full-data ELBO evaluation.

Variances are trace-variances (sum of per-coordinate variances). ``partition``
selects which block of the gradient is measured: ``"all"`` (both, default),
``"mu"`` or ``"log_sigma"``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .core import RngStream, VariationalParams, trace_variance_se
from .objective import ReparamObjective, entropy

DEFAULT_SAMPLES = dict(joint=1000, inner=64, mc=100, elbo=1000)
_CHUNK = 200_000  # max datum evaluations held in memory at once


class VarianceEstimate(NamedTuple):
    value: float
    se: float

    def __float__(self):
        return float(self.value)


def _select(mu, ls, partition: str) -> np.ndarray:
    if partition == "all":
        return np.concatenate([mu, ls], axis=-1)
    if partition == "mu":
        return mu
    if partition == "log_sigma":
        return ls
    raise ValueError(f"unknown partition {partition!r}")


def _pairs(obj: ReparamObjective, S: int, rng: RngStream):
    gen = rng.generator()
    idx = gen.integers(obj.N, size=S)
    eps = gen.standard_normal((S, obj.d))
    return idx, eps


def estimate_joint_variance(obj: ReparamObjective, w: VariationalParams, S: int, rng: RngStream,
                            partition: str = "all") -> VarianceEstimate:
    """V_{n,eps}[grad f(w; n, eps)] from S i.i.d. (n, eps) pairs."""
    if S < 2:
        raise ValueError("S must be >= 2")
    idx, eps = _pairs(obj, S, rng)
    mu, ls = obj.grad_f_batch(w, idx, eps)
    return VarianceEstimate(*trace_variance_se(_select(mu, ls, partition)))


def estimator_variance(estimator, w: VariationalParams, S: int, rng: RngStream,
                       partition: str = "all") -> VarianceEstimate:
    """Single-datum variance of a (frozen) estimator over S i.i.d. (n, eps) pairs."""
    if S < 2:
        raise ValueError("S must be >= 2")
    idx, eps = _pairs(estimator.obj, S, rng)
    mu, ls = estimator.per_datum(w, idx, eps)
    return VarianceEstimate(*trace_variance_se(_select(mu, ls, partition)))


def _inner_moments(obj, w, S_inner, eps_all, partition):
    """Per-datum eps-means (N, D) and trace of inner sample variances (N,)."""
    N = obj.N
    per_chunk = max(1, _CHUNK // S_inner)
    means, inner = [], []
    for start in range(0, N, per_chunk):
        ns = np.arange(start, min(N, start + per_chunk))
        idx = np.repeat(ns, S_inner)
        eps = eps_all[start * S_inner: (start + ns.size) * S_inner]
        mu, ls = obj.grad_f_batch(w, idx, eps)
        g = _select(mu, ls, partition).reshape(ns.size, S_inner, -1)
        means.append(g.mean(axis=1))
        inner.append(g.var(axis=1, ddof=1).sum(axis=1))
    return np.concatenate(means), np.concatenate(inner)


def _corrected_spread(means, inner, S_inner):
    N = means.shape[0]
    spread = float(means.var(axis=0).sum())
    # E[popvar(m_hat)] = popvar(m) + (N-1)/N * mean_n tr Var(m_hat_n)
    return spread - (N - 1) / N * float(inner.mean()) / S_inner


def estimate_subsampling_variance(obj: ReparamObjective, w: VariationalParams, S_inner: int, rng: RngStream,
                                  partition: str = "all") -> VarianceEstimate:
    """V_n[grad f(w; n)] with E_eps replaced by S_inner draws per datum, bias-corrected.

    The standard error comes from splitting the inner draws into groups and
    re-estimating on each group.
    """
    if S_inner < 2:
        raise ValueError("S_inner must be >= 2")
    eps_all = rng.generator().standard_normal((obj.N * S_inner, obj.d))
    means, inner = _inner_moments(obj, w, S_inner, eps_all, partition)
    value = _corrected_spread(means, inner, S_inner)
    if obj.N == 1:
        return VarianceEstimate(0.0, 0.0)
    groups = min(8, S_inner // 2)
    if groups < 2:
        return VarianceEstimate(value, float("nan"))
    size = S_inner // groups
    eps_g = eps_all.reshape(obj.N, S_inner, obj.d)
    ests = []
    for k in range(groups):
        sub = eps_g[:, k * size:(k + 1) * size].reshape(-1, obj.d)
        m, v = _inner_moments(obj, w, size, sub, partition)
        ests.append(_corrected_spread(m, v, size))
    return VarianceEstimate(value, float(np.std(ests, ddof=1) / np.sqrt(groups)))


def estimate_mc_variance(obj: ReparamObjective, w: VariationalParams, S_eps: int, rng: RngStream,
                         partition: str = "all") -> VarianceEstimate:
    """V_eps[grad f(w; eps)] where f(w; eps) averages over the full dataset."""
    if S_eps < 2:
        raise ValueError("S_eps must be >= 2")
    eps_all = rng.generator().standard_normal((S_eps, obj.d))
    per_chunk = max(1, _CHUNK // obj.N)
    rows = []
    for start in range(0, S_eps, per_chunk):
        eps = eps_all[start:start + per_chunk]
        idx = np.tile(np.arange(obj.N), eps.shape[0])
        mu, ls = obj.grad_f_batch(w, idx, np.repeat(eps, obj.N, axis=0))
        g = _select(mu, ls, partition).reshape(eps.shape[0], obj.N, -1)
        rows.append(g.mean(axis=1))
    return VarianceEstimate(*trace_variance_se(np.concatenate(rows)))


@dataclass
class VarianceDecomposition:
    v_joint: float
    v_subsampling: float
    v_mc: float
    se_joint: float
    se_subsampling: float
    se_mc: float
    S_joint: int
    S_inner: int
    S_eps: int

    def as_dict(self):
        return asdict(self)


def decompose_variance(obj: ReparamObjective, w: VariationalParams, rng: RngStream,
                       S: int = DEFAULT_SAMPLES["joint"], S_inner: int = DEFAULT_SAMPLES["inner"],
                       S_eps: int = DEFAULT_SAMPLES["mc"], partition: str = "all") -> VarianceDecomposition:
    vj = estimate_joint_variance(obj, w, S, rng.child(0), partition)
    vs = estimate_subsampling_variance(obj, w, S_inner, rng.child(1), partition)
    vm = estimate_mc_variance(obj, w, S_eps, rng.child(2), partition)
    return VarianceDecomposition(vj.value, vs.value, vm.value, vj.se, vs.se, vm.se, S, S_inner, S_eps)


def full_objective_samples(obj: ReparamObjective, w: VariationalParams, eps) -> np.ndarray:
    """E_n f(w; n, eps_s) for each row of ``eps`` (uncounted model calls)."""
    model = obj.model
    eps = np.atleast_2d(eps)
    H = entropy(w)
    per_chunk = max(1, _CHUNK // model.N)
    out = []
    for start in range(0, eps.shape[0], per_chunk):
        e = eps[start:start + per_chunk]
        Z = w.mu + e * w.sigma
        idx = np.tile(np.arange(model.N), e.shape[0])
        ll = model.log_lik(idx, np.repeat(Z, model.N, axis=0)).reshape(e.shape[0], model.N).sum(axis=1)
        out.append(-(ll + model.log_prior(Z)) - H)
    return np.concatenate(out)


def evaluate_elbo(obj: ReparamObjective, w: VariationalParams, S: int, rng: RngStream) -> float:
    """Full-data ELBO estimated with S Monte Carlo draws."""
    if S < 1:
        raise ValueError("S must be >= 1")
    eps = rng.generator().standard_normal((S, obj.d))
    return -float(full_objective_samples(obj, w, eps).mean())


@dataclass
class TraceRecord:
    iteration: int
    epoch: int
    elbo: float
    v_joint: float | None
    v_sub: float | None
    v_mc: float | None
    grad_calls: int
    hvp_calls: int
    step_size: float
    seed: int

    FIELDS = ("iteration", "epoch", "elbo", "v_joint", "v_sub", "v_mc",
              "grad_calls", "hvp_calls", "step_size", "seed")

    def row(self) -> list[str]:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, float):
                return repr(x)
            return str(x)
        return [fmt(getattr(self, f)) for f in self.FIELDS]
