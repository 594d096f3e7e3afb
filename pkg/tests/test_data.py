import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointcv.core import RngStream
from jointcv.data import (Dataset, MinibatchSchedule, load_csv, next_batch, save_csv, standardize,
                          synth_bradley_terry, synth_glm, synth_linear_gaussian, synth_logistic,
                          synth_multiclass)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_exact(tmp_path):
    p = write(tmp_path, "a,b,label\n1.5,2,0\n-3,4e-1,1\n0,0,1\n")
    ds = load_csv(p)
    np.testing.assert_array_equal(ds.features, [[1.5, 2], [-3, 0.4], [0, 0]])
    np.testing.assert_array_equal(ds.labels, [0, 1, 1])
    assert ds.feature_names == ["a", "b"]
    assert ds.N == 3


def test_standardize_population_convention(tmp_path):
    p = write(tmp_path, "x,c,label\n1,5,0\n2,5,1\n3,5,0\n")
    ds = load_csv(p, standardize_features=True)
    np.testing.assert_allclose(ds.features[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
    np.testing.assert_array_equal(ds.features[:, 1], [0, 0, 0])
    assert ds.standardized


@given(st.integers(2, 50), st.integers(1, 6), st.integers(0, 10 ** 6))
@settings(max_examples=30)
def test_standardize_invariants(N, p, seed):
    X = np.random.default_rng(seed).normal(3.0, 5.0, (N, p))
    X[:, 0] = 7.0
    Z = standardize(X)
    assert np.all(np.abs(Z.mean(axis=0)) <= 1e-10)
    np.testing.assert_allclose(Z[:, 1:].var(axis=0), 1.0, atol=1e-8)


def test_errors_name_line_and_column(tmp_path):
    with pytest.raises(ValueError, match=r"line 3, column 'b'"):
        load_csv(write(tmp_path, "a,b,label\n1,2,0\n1,oops,1\n"))
    with pytest.raises(ValueError, match="line 2: expected 3 fields"):
        load_csv(write(tmp_path, "a,b,label\n1,2\n"))
    with pytest.raises(ValueError, match="label column"):
        load_csv(write(tmp_path, "a,b,y\n1,2,0\n"))
    with pytest.raises(ValueError, match="missing value"):
        load_csv(write(tmp_path, "a,b,label\n1,nan,0\n"))
    with pytest.raises(ValueError, match="line 2, column 'label'"):
        load_csv(write(tmp_path, "a,b,label\n1,2,\n"))


def test_roundtrip(tmp_path):
    ds = synth_linear_gaussian(30, 4, 0.3, 1)
    p = tmp_path / "rt.csv"
    save_csv(ds, p)
    back = load_csv(p, label_column="target")
    np.testing.assert_allclose(back.features, ds.features, rtol=1e-12)
    np.testing.assert_allclose(back.labels, ds.labels, rtol=1e-12)


def test_synth_determinism_and_truth():
    for make in (lambda s: synth_logistic(20, 3, s), lambda s: synth_bradley_terry(20, 4, s),
                 lambda s: synth_linear_gaussian(20, 3, 0.5, s), lambda s: synth_multiclass(20, 3, 3, s),
                 lambda s: synth_glm(20, 4, 2, "softmax", s)):
        a, b, c = make(1), make(1), make(2)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.features, c.features)
        assert a.truth


def test_bradley_terry_fair_scores():
    ds = synth_bradley_terry(10 ** 5, 5, 3, scores=np.zeros(5))
    rate = ds.labels.mean()
    assert abs(rate - 0.5) <= 4 * np.sqrt(0.25 / len(ds.labels))
    assert np.all(ds.features[:, 0] != ds.features[:, 1])


def test_linear_gaussian_noiseless():
    ds = synth_linear_gaussian(50, 4, 1e-12, 0)
    np.testing.assert_allclose(ds.labels, ds.features @ ds.truth["z"], atol=1e-8)


def test_schedule_even_split():
    s = MinibatchSchedule(10, 5, RngStream(0))
    a, b = next_batch(s), next_batch(s)
    assert len(a) == len(b) == 5
    assert set(a) | set(b) == set(range(10)) and not set(a) & set(b)
    assert s.epoch == 1 and s.batches_per_epoch == 2


def test_schedule_remainder():
    s = MinibatchSchedule(7, 5, RngStream(0))
    assert [len(next_batch(s)), len(next_batch(s))] == [5, 2]


def test_schedule_reproducible():
    def perms(seed):
        s = MinibatchSchedule(9, 4, RngStream(seed))
        return np.concatenate([next_batch(s) for _ in range(6)])
    assert np.array_equal(perms(3), perms(3))
    assert not np.array_equal(perms(3), perms(4))


@given(st.integers(1, 40), st.integers(1, 12), st.integers(1, 5), st.integers(0, 1000))
@settings(max_examples=40)
def test_schedule_coverage(N, B, E, seed):
    s = MinibatchSchedule(N, B, RngStream(seed))
    counts = np.zeros(N, dtype=int)
    for _ in range(E * s.batches_per_epoch):
        b = next_batch(s)
        assert len(set(b.tolist())) == len(b)
        counts[b] += 1
    assert np.all(counts == E)


def test_schedule_validation():
    with pytest.raises(ValueError):
        MinibatchSchedule(0, 3, RngStream(0))
    with pytest.raises(ValueError):
        MinibatchSchedule(5, 0, RngStream(0))
