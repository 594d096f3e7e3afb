import csv
import itertools
import math

import numpy as np
import pytest

from jointcv import cli
from jointcv.cli import ADAM_GRID, SGD_GRID, RunConfig, make_config, read_config_file
from jointcv.data import load_csv
from jointcv.estimators import ParamTable, write_checkpoint


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cfg(tmp_path, **kw):
    base = dict(task="logistic", n=40, dim=3, batch_size=5, epochs=2, elbo_samples=20, out=str(tmp_path))
    base.update(kw)
    return make_config(**base)


def test_zero_iterations(tmp_path):
    path = cli.run(cfg(tmp_path, iters=0))
    text = open(path).read().splitlines()
    assert text[0] == ",".join(cli.TraceRecord.FIELDS)
    assert len(text) == 2 and text[1].startswith("0,0,")


def test_run_deterministic(tmp_path):
    c = cfg(tmp_path, estimator="joint-saga", var_every=8, var_samples=50)
    a = open(cli.run(c, str(tmp_path / "a.csv"))).read()
    b = open(cli.run(c, str(tmp_path / "b.csv"))).read()
    assert a == b
    its = [int(r["iteration"]) for r in rows(tmp_path / "a.csv")]
    assert its == sorted(set(its))


def test_naive_grad_count(tmp_path):
    r = rows(cli.run(cfg(tmp_path, iters=13, batch_size=3, eval_every=5)))
    assert [int(x["iteration"]) for x in r] == [0, 5, 10, 13]
    assert int(r[-1]["grad_calls"]) == 13 * 3 and int(r[-1]["hvp_calls"]) == 0


@pytest.mark.parametrize("name,per_iter", [("naive", (5, 0)), ("cv", (5, 5)), ("joint-saga", (10, 5))])
def test_count_columns_match_costs(tmp_path, name, per_iter):
    N, B, E = 40, 5, 3
    r = rows(cli.run(cfg(tmp_path, estimator=name, epochs=E, n=N, batch_size=B)))
    T = E * N // B
    g, h = int(r[-1]["grad_calls"]), int(r[-1]["hvp_calls"])
    if name == "joint-saga":
        # one naive epoch, one full pass for G, then 2 gradients + 1 HVP per datum
        assert (g, h) == (N + N + (T - N // B) * per_iter[0], (T - N // B) * per_iter[1])
    else:
        assert (g, h) == (T * per_iter[0], T * per_iter[1])


def test_inc_and_svrg_count_columns(tmp_path):
    N, B = 40, 1
    with pytest.warns(RuntimeWarning, match="O\\(N\\)"):
        c = cfg(tmp_path, estimator="inc", epochs=2, n=N, batch_size=B)
    r = rows(cli.run(c))
    init = N + N
    assert int(r[-1]["grad_calls"]) - init == N * (N + 2)
    r = rows(cli.run(cfg(tmp_path, estimator="joint-svrg", epochs=3, n=N, batch_size=B)))
    assert int(r[-1]["grad_calls"]) + int(r[-1]["hvp_calls"]) == 4 * 3 * N


def test_smiso_rejects_other_optimizers():
    for opt in ("sgd", "adam"):
        with pytest.raises(ValueError, match="smiso"):
            RunConfig(estimator="smiso", optimizer=opt)
    assert RunConfig(estimator="smiso").optimizer is None
    assert cli.main(["run", "--estimator", "smiso", "--optimizer", "adam"]) == 2


def test_ensemble_warns():
    with pytest.warns(RuntimeWarning):
        RunConfig(estimator="ensemble")


def test_invalid_combinations():
    with pytest.raises(ValueError):
        RunConfig(estimator="bogus")
    with pytest.raises(ValueError):
        RunConfig(task="glm-dropout", estimator="inc")
    with pytest.raises(ValueError):
        RunConfig(optimizer="rmsprop")


def test_unreadable_dataset(tmp_path):
    with pytest.raises(ValueError, match="cannot read"):
        cli.run(cfg(tmp_path, data=str(tmp_path / "missing.csv")))


def test_default_grids():
    assert min(SGD_GRID) == 1e-5 and max(SGD_GRID) <= 1e-2
    assert min(ADAM_GRID) == 1e-3 and max(ADAM_GRID) == 1e-1
    assert cli._parse_grid("sgd") == SGD_GRID


def test_sweep_grid_of_one_equals_run(tmp_path):
    c = cfg(tmp_path / "s", estimator="cv", grid=(2e-3,), step_size=2e-3)
    cli.sweep(c)
    single = cli.run(cfg(tmp_path / "r", estimator="cv", step_size=2e-3))
    assert open(tmp_path / "s" / cli._cell_name(2e-3, 0)).read() == open(single).read()


def test_sweep_best_is_pointwise_max(tmp_path):
    c = cfg(tmp_path, grid=(5e-3, 1e-3, 1e-4), seeds=2, epochs=3)
    res = cli.sweep(c)
    best = np.array([float(r["best_elbo"]) for r in rows(tmp_path / "best.csv")])
    np.testing.assert_array_equal(best, res["best"])
    for lr in c.grid:
        for s in (0, 1):
            e = np.array([float(r["elbo"]) for r in rows(tmp_path / cli._cell_name(lr, s))])
            assert e.shape == best.shape
        mean_curve = res["curves"][lr]
        assert np.all(best >= mean_curve - 1e-12)
    summary = rows(tmp_path / "summary.csv")
    assert sorted(float(r["step_size"]) for r in summary) == sorted(c.grid)


def test_sweep_deterministic_and_parallel(tmp_path):
    a = cfg(tmp_path / "a", grid=(1e-3, 2e-3), seeds=2)
    b = cfg(tmp_path / "b", grid=(1e-3, 2e-3), seeds=2, jobs=2)
    cli.sweep(a)
    cli.sweep(b)
    for name in ["best.csv", "summary.csv", cli._cell_name(1e-3, 1)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_divergence_is_recorded(tmp_path):
    r = rows(cli.run(cfg(tmp_path, step_size=1e3, epochs=3)))
    assert math.isnan(float(r[-1]["elbo"]))
    assert len(r) == 4


SMOKE = [(t, e, o) for t, e, o in itertools.product(cli.TASKS, cli.ESTIMATORS, ("sgd", "adam"))
         if not (t == "glm-dropout" and e not in cli.GLM_ESTIMATORS) and not (e == "smiso" and o == "adam")]


@pytest.mark.parametrize("task,est,opt", SMOKE)
def test_smoke_matrix(tmp_path, task, est, opt):
    kw = dict(task=task, estimator=est, n=100, dim=4, batch_size=10, epochs=2, elbo_samples=10,
              step_size=1e-3, out=str(tmp_path), var_every=10, var_samples=20)
    if est == "smiso":
        kw["step_size"] = 1e-2
    else:
        kw["optimizer"] = opt
    if task == "glm-dropout":
        kw["glm_loss"] = "softmax" if opt == "adam" else "squared"
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        c = make_config(**kw)
    r = rows(cli.run(c))
    assert len(r) == 3
    assert all(np.isfinite(float(x["elbo"])) for x in r)


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# experiment\ntask = linear-gaussian\nestimator = cv\nstep-size = 2e-3\n"
                 "grid = 1e-3, 5e-4\nstandardize = true\niters = none\n")
    values = read_config_file(p)
    assert values == dict(task="linear-gaussian", estimator="cv", step_size=2e-3, grid=(1e-3, 5e-4),
                          standardize=True, iters=None)
    ns = cli._parser().parse_args(["run", "--config", str(p), "--estimator", "naive", "--iters", "3"])
    c = cli.config_from_args(ns)
    assert (c.task, c.estimator, c.step_size, c.iters) == ("linear-gaussian", "naive", 2e-3, 3)
    p.write_text("nonsense line\n")
    with pytest.raises(ValueError, match="line 1"):
        read_config_file(p)


def _lg_checkpoint(tmp_path, N, d, perturb=False):
    c = make_config(task="linear-gaussian", n=N, dim=d, out=str(tmp_path), checkpoint=str(tmp_path / "ck.csv"),
                    partition="mu", var_samples=4000)
    obj = cli.build_objective(c)
    w = cli.initial_params(obj, 0)
    write_checkpoint(c.checkpoint, w, ParamTable.synced(obj, w))
    return c


def test_decompose_idealized_rows(tmp_path):
    c = _lg_checkpoint(tmp_path, 20, 5)
    row = cli.decompose(c)
    assert row["var_joint_saga"] <= 1e-12
    assert row["var_cv"] >= row["v_sub"] - 3 * np.hypot(row["se_cv"], row["se_sub"])
    assert row["var_inc"] >= row["v_mc"] - 3 * np.hypot(row["se_inc"], row["se_mc"])
    assert len(rows(tmp_path / "decompose.csv")) == 1


def test_decompose_single_datum(tmp_path):
    row = cli.decompose(_lg_checkpoint(tmp_path, 1, 3))
    assert row["v_sub"] == 0.0


def test_decompose_reseed_stable(tmp_path):
    c = _lg_checkpoint(tmp_path, 20, 5)
    c2 = make_config(**{**c.__dict__, "seed": 7})
    a, b = cli.decompose(c), cli.decompose(c2)
    for k in ("joint", "sub", "mc", "cv", "inc"):
        v = "v_" + k if k in ("joint", "sub", "mc") else "var_" + k
        assert abs(a[v] - b[v]) < 3 * np.hypot(a["se_" + k], b["se_" + k])


def test_decompose_mismatch(tmp_path):
    c = _lg_checkpoint(tmp_path, 20, 5)
    bad = make_config(**{**c.__dict__, "dim": 4})
    with pytest.raises(ValueError, match="dimension"):
        cli.decompose(bad)


def test_run_writes_checkpoint_usable_by_decompose(tmp_path):
    ck = str(tmp_path / "ck.csv")
    c = cfg(tmp_path, estimator="joint-saga", checkpoint=ck, epochs=3)
    cli.run(c)
    row = cli.decompose(make_config(**{**c.__dict__, "var_samples": 200}))
    assert all(np.isfinite(v) for v in row.values())


def test_synth_subcommand(tmp_path):
    out = tmp_path / "bt.csv"
    assert cli.main(["synth", "--task", "bradley-terry", "--n", "30", "--dim", "4", "--out", str(out)]) == 0
    ds = load_csv(out, label_column="outcome")
    assert ds.features.shape == (30, 2)
    # a run on the written file matches a run on the generator
    a = cli.run(cfg(tmp_path / "a", task="bradley-terry", n=30, dim=4))
    b = cli.run(cfg(tmp_path / "b", task="bradley-terry", data=str(out), label_column="outcome", dim=4))
    assert open(a).read() == open(b).read()


def test_main_run(tmp_path, capsys):
    assert cli.main(["run", "--task", "logistic", "--n", "20", "--dim", "2", "--iters", "4",
                     "--elbo-samples", "5", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip().endswith("trace.csv")
