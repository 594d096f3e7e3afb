import numpy as np
import pytest

from jointcv.core import RngStream, VariationalParams
from jointcv.data import synth_linear_gaussian, synth_logistic
from jointcv.models import LinearGaussianModel, LogisticRegressionModel
from jointcv.objective import ReparamObjective


def random_params(d, seed=0, scale=0.5):
    g = np.random.default_rng(seed)
    return VariationalParams(g.standard_normal(d), scale * g.standard_normal(d) - 0.5)


def lg_objective(N=5, d=3, tau=1.0, seed=0):
    ds = synth_linear_gaussian(N, d, tau, seed)
    return ReparamObjective(LinearGaussianModel(ds.features, ds.labels, tau))


def logistic_objective(N=20, d=4, seed=0):
    ds = synth_logistic(N, d, seed)
    return ReparamObjective(LogisticRegressionModel(ds.features, ds.labels))


def lg_exact_gradient(obj, w):
    """E_n E_eps grad f for LinearGaussian: k_n is quadratic, so E_eps grad k_n(mu + eps sigma) = grad k_n(mu)
    and E_eps[grad k_n(z) * eps * sigma] = H_n sigma^2 (diagonal)."""
    m = obj.model
    mu = np.zeros(obj.d)
    ls = np.zeros(obj.d)
    for n in range(obj.N):
        g = m.grad_k(np.array([n]), w.mu[None])[0]
        H = m.hessian_k(n)
        mu += -g
        ls += -np.diag(H) * w.sigma ** 2 - 1.0
    return mu / obj.N, ls / obj.N


@pytest.fixture
def rng():
    return RngStream(1234)
