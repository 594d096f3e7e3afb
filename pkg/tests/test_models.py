import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointcv.data import synth_bradley_terry, synth_linear_gaussian, synth_logistic, synth_multiclass
from jointcv.models import (BradleyTerryModel, LinearGaussianModel, LogisticRegressionModel,
                            MulticlassLogisticModel, grad_k_n, hvp_k_n, k_n)

LOG2PI = np.log(2 * np.pi)


def all_models():
    lg = synth_linear_gaussian(12, 4, 0.7, 1)
    lo = synth_logistic(15, 5, 2)
    mc = synth_multiclass(15, 3, 4, 3)
    bt = synth_bradley_terry(25, 6, 4)
    return {
        "linear-gaussian": LinearGaussianModel(lg.features, lg.labels, 0.7),
        "logistic": LogisticRegressionModel(lo.features, lo.labels),
        "multiclass": MulticlassLogisticModel(mc.features, mc.labels, 4),
        "bradley-terry": BradleyTerryModel(bt.features, bt.labels, 6),
    }


MODELS = all_models()


def fd_grad(f, z, h=1e-5):
    out = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        out[i] = (f(z + e) - f(z - e)) / (2 * h)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_grad_and_hvp_match_finite_differences(name):
    m = MODELS[name]
    g = np.random.default_rng(0)
    for _ in range(20):
        n = int(g.integers(m.N))
        z = g.standard_normal(m.d)
        v = g.standard_normal(m.d)
        grad = grad_k_n(m, n, z)
        assert rel_err(grad, fd_grad(lambda t: k_n(m, n, t), z)) <= 1e-5
        hv = hvp_k_n(m, n, z, v)
        fd = fd_grad(lambda t: float(grad_k_n(m, n, t) @ v), z)  # d/dz (grad . v) = H v
        assert rel_err(hv, fd) <= 1e-5


@pytest.mark.parametrize("name", sorted(MODELS))
def test_hvp_linear_and_symmetric(name):
    m = MODELS[name]
    g = np.random.default_rng(1)
    n = 3
    z, u, v = g.standard_normal((3, m.d))
    a, b = 0.7, -1.3
    lhs = hvp_k_n(m, n, z, a * u + b * v)
    rhs = a * hvp_k_n(m, n, z, u) + b * hvp_k_n(m, n, z, v)
    assert rel_err(lhs, rhs) <= 1e-10
    x, y = u @ hvp_k_n(m, n, z, v), v @ hvp_k_n(m, n, z, u)
    assert abs(x - y) <= 1e-10 * max(abs(x), 1.0)
    np.testing.assert_array_equal(hvp_k_n(m, n, z, np.zeros(m.d)), np.zeros(m.d))


@pytest.mark.parametrize("name", sorted(MODELS))
def test_mean_grad_is_scaled_full_gradient(name):
    m = MODELS[name]
    z = np.random.default_rng(2).standard_normal(m.d)
    mean = np.mean([grad_k_n(m, n, z) for n in range(m.N)], axis=0)
    # E_n grad k_n = grad log p(x | z) + grad log p(z), i.e. the full log-joint gradient
    np.testing.assert_allclose(mean, m.grad_log_joint(z), rtol=1e-10, atol=1e-10)
    assert np.mean([k_n(m, n, z) for n in range(m.N)]) == pytest.approx(m.log_joint(z), rel=1e-12)


def test_logistic_zero_row():
    X = np.array([[0.0, 0.0], [1.0, 2.0], [0.5, -1.0]])
    m = LogisticRegressionModel(X, np.array([1, 0, 1]))
    z = np.array([0.3, -2.0])
    prior = -0.5 * z @ z - LOG2PI
    assert k_n(m, 0, z) == pytest.approx(3 * -np.log(2) + prior, rel=1e-14)


def test_logistic_hvp_formula():
    ds = synth_logistic(10, 3, 0)
    m = LogisticRegressionModel(ds.features, ds.labels)
    z, v = np.array([0.1, -0.4, 0.9]), np.array([1.0, 2.0, -1.0])
    x = ds.features[4]
    s = 1 / (1 + np.exp(-x @ z))
    expected = -m.N * s * (1 - s) * (x @ v) * x - v
    np.testing.assert_allclose(hvp_k_n(m, 4, z, v), expected, rtol=1e-12)


def test_bradley_terry_equal_scores_and_sparsity():
    m = BradleyTerryModel(np.array([[0, 2], [1, 3]]), np.array([1, 0]), 4)
    theta = np.array([0.5, -0.2, 0.5, 1.0])
    prior = -0.5 * theta @ theta - 2 * LOG2PI
    assert k_n(m, 0, theta) == pytest.approx(2 * -np.log(2) + prior, rel=1e-14)
    g = grad_k_n(m, 0, theta)
    np.testing.assert_array_equal(g[[1, 3]], -theta[[1, 3]])
    lik = g + theta
    assert np.count_nonzero(lik) <= 2


def test_linear_gaussian_hand_case():
    m = LinearGaussianModel(np.array([[1.0]]), np.array([0.0]), 1.0)
    assert k_n(m, 0, np.array([0.0])) == pytest.approx(-0.5 * LOG2PI - 0.5 * LOG2PI, rel=1e-15)


def test_linear_gaussian_closed_forms():
    ds = synth_linear_gaussian(6, 3, 0.5, 0)
    m = LinearGaussianModel(ds.features, ds.labels, 0.5)
    z, v = np.random.default_rng(0).standard_normal((2, 3))
    x, y = ds.features[2], ds.labels[2]
    np.testing.assert_allclose(grad_k_n(m, 2, z), -m.N * x * (x @ z - y) / 0.25 - z, rtol=1e-12)
    np.testing.assert_allclose(hvp_k_n(m, 2, z, v), (-m.N * np.outer(x, x) / 0.25 - np.eye(3)) @ v, rtol=1e-12)


@given(st.integers(0, 5), st.integers(0, 2 ** 31))
@settings(max_examples=30)
def test_linear_gaussian_quadratic_exact(n, seed):
    ds = synth_linear_gaussian(6, 3, 0.8, 1)
    m = LinearGaussianModel(ds.features, ds.labels, 0.8)
    z, z0 = np.random.default_rng(seed).standard_normal((2, 3))
    dz = z - z0
    taylor = k_n(m, n, z0) + dz @ grad_k_n(m, n, z0) + 0.5 * dz @ hvp_k_n(m, n, z0, dz)
    assert taylor == pytest.approx(k_n(m, n, z), rel=1e-10, abs=1e-9)


def test_multiclass_dimension():
    ds = synth_multiclass(10, 3, 4, 0)
    m = MulticlassLogisticModel(ds.features, ds.labels, 4)
    assert m.d == 12


def test_errors():
    m = MODELS["logistic"]
    with pytest.raises(IndexError):
        k_n(m, m.N, np.zeros(m.d))
    with pytest.raises(IndexError):
        grad_k_n(m, -1, np.zeros(m.d))
    with pytest.raises(ValueError):
        k_n(m, 0, np.full(m.d, np.nan))
    with pytest.raises(ValueError):
        hvp_k_n(m, 0, np.zeros(m.d), np.zeros(m.d + 1))
    with pytest.raises(ValueError):
        LogisticRegressionModel(np.zeros((3, 2)), np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        BradleyTerryModel(np.array([[0, 5]]), np.array([1]), 3)
