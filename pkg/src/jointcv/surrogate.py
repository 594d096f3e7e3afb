"""Second-order Taylor surrogate of f in the mean parameters.

The surrogate expands k_n around z0 = mu_t (the anchoring parameters, never
differentiated through), so its mu-gradient at noise eps is

    -[grad k_n(z0) + hess k_n(z0) (eps * sigma_t)]

and, since eps has mean zero, its eps-expectation is just -grad k_n(z0).
Only the mu-partition is controlled; the entropy contributes nothing there.
"""

from __future__ import annotations

import numpy as np

from .core import VariationalParams
from .objective import ReparamObjective


def grad_surrogate_mu_batch(obj: ReparamObjective, mu_t, ls_t, idx, eps) -> np.ndarray:
    """Per-datum surrogate mu-gradients. Costs one gradient and one HVP per datum."""
    idx = obj.check_index(idx)
    mu_t = np.broadcast_to(mu_t, (idx.size, obj.d))
    direction = np.asarray(eps) * np.exp(ls_t)
    direction = np.broadcast_to(direction, (idx.size, obj.d))
    return -(obj.grad_k(idx, mu_t) + obj.hvp_k(idx, mu_t, direction))


def expect_grad_surrogate_mu_batch(obj: ReparamObjective, mu_t, idx) -> np.ndarray:
    """Closed-form eps-mean of the surrogate mu-gradient. One gradient per datum."""
    idx = obj.check_index(idx)
    return -obj.grad_k(idx, np.broadcast_to(mu_t, (idx.size, obj.d)))


def surrogate_noise_mu_batch(obj: ReparamObjective, mu_t, ls_t, idx, eps) -> np.ndarray:
    """expect_grad_surrogate_mu - grad_surrogate_mu for a common anchor.

    The grad k_n(z0) terms cancel exactly, leaving hess k_n(z0)(eps * sigma_t):
    one HVP per datum and no gradient call.
    """
    idx = obj.check_index(idx)
    mu_t = np.broadcast_to(mu_t, (idx.size, obj.d))
    direction = np.broadcast_to(np.asarray(eps) * np.exp(ls_t), (idx.size, obj.d))
    return obj.hvp_k(idx, mu_t, direction)


def grad_surrogate_mu(obj: ReparamObjective, wtable: VariationalParams, n: int, eps) -> np.ndarray:
    return grad_surrogate_mu_batch(obj, wtable.mu, wtable.log_sigma, [n], eps)[0]


def expect_grad_surrogate_mu(obj: ReparamObjective, wtable: VariationalParams, n: int) -> np.ndarray:
    return expect_grad_surrogate_mu_batch(obj, wtable.mu, [n])[0]


def full_expect_grad_surrogate_mu(obj: ReparamObjective, wtable: VariationalParams) -> np.ndarray:
    """E_n of the closed-form expected surrogate gradient at one anchor (N gradient calls)."""
    return expect_grad_surrogate_mu_batch(obj, wtable.mu, np.arange(obj.N)).mean(axis=0)
