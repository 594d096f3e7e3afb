"""Experiment harness: run, sweep, decompose and synth subcommands.

    jointcv run --task logistic --estimator joint-saga --step-size 1e-3 --epochs 20 --out runs/a
    jointcv sweep --task logistic --estimator cv --grid 1e-3,5e-4 --seeds 5 --out runs/grid
    jointcv decompose --task logistic --checkpoint runs/a/checkpoint.csv --out runs/a
    jointcv synth --task logistic --n 200 --dim 10 --out data.csv

Every flag can also come from a flat ``key = value`` file passed with
``--config``; explicit flags win. Output is CSV only.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core import RngStream, VariationalParams, draw_standard_normal
from .data import (Dataset, MinibatchSchedule, load_csv, save_csv, synth_bradley_terry, synth_glm,
                   synth_linear_gaussian, synth_logistic, synth_multiclass)
from .diagnostics import (DEFAULT_SAMPLES, TraceRecord, decompose_variance, estimator_variance,
                          evaluate_elbo)
from .dropout_glm import (DropoutGlmObjective, GlmCVEstimator, GlmEstimator, GlmJointEstimator,
                          init_glm_table)
from .estimators import (ParamTable, init_table, make_estimator, read_checkpoint, write_checkpoint)
from .models import BradleyTerryModel, LinearGaussianModel, LogisticRegressionModel, MulticlassLogisticModel
from .objective import ReparamObjective
from .optimizers import SmisoState, make_optimizer, smiso_step

TASKS = ("logistic", "multiclass", "bradley-terry", "linear-gaussian", "glm-dropout")
ESTIMATORS = ("naive", "cv", "inc", "ensemble", "joint-saga", "joint-svrg", "smiso")
GLM_ESTIMATORS = ("naive", "cv", "joint-saga")
TABLE_ESTIMATORS = ("inc", "ensemble", "joint-saga")
SGD_GRID = (7.5e-3, 5e-3, 2.5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 2.5e-5, 1e-5)
ADAM_GRID = (1e-1, 5e-2, 1e-2, 5e-3, 1e-3)
SMISO_ALPHA = 0.9


@dataclass
class RunConfig:
    task: str = "logistic"
    estimator: str = "naive"
    optimizer: str | None = None
    step_size: float = 1e-3
    grid: tuple = ()
    batch_size: int = 5
    iters: int | None = None
    epochs: int = 10
    eval_every: int | None = None
    var_every: int = 0
    elbo_samples: int = 200
    var_samples: int = DEFAULT_SAMPLES["joint"]
    seed: int = 0
    seeds: int = 1
    svrg_k: int | None = None
    beta: float = 0.5
    out: str = "runs"
    # data
    data: str | None = None
    label_column: str = "label"
    standardize: bool = False
    data_seed: int = 0
    n: int = 200
    dim: int | None = None
    classes: int | None = None
    tau: float = 1.0
    glm_loss: str = "squared"
    dropout_sigma: float = 0.5
    checkpoint: str | None = None
    partition: str = "all"
    per_datum_noise: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if self.estimator == "smiso":
            if self.optimizer not in (None, "smiso"):
                raise ValueError("smiso fixes its own update rule and cannot be combined with "
                                 f"optimizer {self.optimizer!r}")
        elif self.optimizer is None:
            self.optimizer = "sgd"
        elif self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.task == "glm-dropout" and self.estimator not in GLM_ESTIMATORS:
            raise ValueError(f"glm-dropout supports estimators {GLM_ESTIMATORS}")
        glm = self.task == "glm-dropout"
        if self.dim is None:
            self.dim = 20 if glm else 10
        if self.classes is None:
            self.classes = 5 if glm else 3
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.iters is not None and self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.estimator in ("inc", "ensemble"):
            warnings.warn(f"{self.estimator} recomputes a full pass over the data each step: "
                          "O(N) gradient evaluations per iteration", RuntimeWarning, stacklevel=2)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_grid(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(x) for x in text)
    text = str(text).strip()
    if not text:
        return ()
    if text in ("sgd", "adam"):
        return SGD_GRID if text == "sgd" else ADAM_GRID
    return tuple(float(x) for x in text.split(","))


def _coerce(key: str, value):
    if value is None or key not in _FIELD_TYPES:
        return value
    typ = str(_FIELD_TYPES[key])
    if key == "grid":
        return _parse_grid(value)
    if isinstance(value, str):
        if value.lower() in ("none", ""):
            return None
        if typ.startswith("bool"):
            return value.lower() in ("1", "true", "yes", "on")
        if typ.startswith("int"):
            return int(value)
        if typ.startswith("float"):
            return float(value)
    return value


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
            out[key] = _coerce(key, value)
    return out


def make_config(**kw) -> RunConfig:
    return RunConfig(**{k: _coerce(k, v) for k, v in kw.items()})


# --- problem construction ----------------------------------------------------------

def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data is not None:
        try:
            return load_csv(cfg.data, cfg.label_column, cfg.standardize)
        except OSError as exc:
            raise ValueError(f"cannot read dataset {cfg.data!r}: {exc}") from exc
    if cfg.task == "logistic":
        return synth_logistic(cfg.n, cfg.dim, cfg.data_seed)
    if cfg.task == "multiclass":
        return synth_multiclass(cfg.n, cfg.dim, cfg.classes, cfg.data_seed)
    if cfg.task == "bradley-terry":
        return synth_bradley_terry(cfg.n, cfg.dim, cfg.data_seed)
    if cfg.task == "linear-gaussian":
        return synth_linear_gaussian(cfg.n, cfg.dim, cfg.tau, cfg.data_seed)
    return synth_glm(cfg.n, cfg.dim, cfg.classes, cfg.glm_loss, cfg.data_seed)


def build_objective(cfg: RunConfig, ds: Dataset | None = None):
    ds = ds if ds is not None else load_dataset(cfg)
    X, y = ds.features, ds.labels
    if cfg.task == "logistic":
        return ReparamObjective(LogisticRegressionModel(X, y))
    if cfg.task == "multiclass":
        K = max(cfg.classes, int(np.max(y)) + 1)
        return ReparamObjective(MulticlassLogisticModel(X, y, K))
    if cfg.task == "bradley-terry":
        M = max(cfg.dim, int(np.max(X)) + 1) if cfg.data is None else int(np.max(X)) + 1
        return ReparamObjective(BradleyTerryModel(X, y, M))
    if cfg.task == "linear-gaussian":
        return ReparamObjective(LinearGaussianModel(X, y, cfg.tau))
    if cfg.glm_loss == "squared":
        Y = np.asarray(y, dtype=np.float64).reshape(len(X), -1)
        return DropoutGlmObjective(X, Y, Y.shape[1], "squared", cfg.dropout_sigma)
    K = max(cfg.classes, int(np.max(y)) + 1)
    return DropoutGlmObjective(X, y, K, "softmax", cfg.dropout_sigma)


def initial_params(obj, seed: int):
    """mu ~ N(0, I), log sigma = 0 (GLM weights start at zero)."""
    if isinstance(obj, DropoutGlmObjective):
        return np.zeros(obj.shape)
    mu = RngStream(seed, 1).generator().standard_normal(obj.d)
    return VariationalParams(mu, np.zeros(obj.d))


def _streams(seed: int):
    return dict(schedule=RngStream(seed, 2), eps=RngStream(seed, 3),
                elbo=RngStream(seed, 4), var=RngStream(seed, 5))


# --- single run ---------------------------------------------------------------------

@dataclass
class RunResult:
    records: list = field(default_factory=list)
    w: object = None
    table: object = None
    diverged: bool = False

    def elbos(self) -> np.ndarray:
        return np.array([r.elbo for r in self.records])


def _budget(cfg: RunConfig, N: int) -> tuple[int, int]:
    per_epoch = math.ceil(N / min(cfg.batch_size, N))
    total = cfg.iters if cfg.iters is not None else cfg.epochs * per_epoch
    return total, per_epoch


def simulate(cfg: RunConfig, obj=None) -> RunResult:
    """Optimize under ``cfg`` for its iteration budget, recording a trace row per evaluation."""
    obj = obj if obj is not None else build_objective(cfg)
    glm = isinstance(obj, DropoutGlmObjective)
    counter = obj.counter
    st = _streams(cfg.seed)
    total, per_epoch = _budget(cfg, obj.N)
    eval_every = cfg.eval_every or per_epoch
    schedule = MinibatchSchedule(obj.N, cfg.batch_size, st["schedule"])
    w = initial_params(obj, cfg.seed)
    res = RunResult()

    def noise(it, B):
        # one draw shared across the batch unless per-datum noise is requested
        if glm:
            return obj.sample_noise(st["eps"].child(it), B if cfg.per_datum_noise else None)
        if cfg.per_datum_noise:
            return st["eps"].child(it).generator().standard_normal((B, obj.d))
        return draw_standard_normal(st["eps"].child(it), obj.d)

    def record(it, w):
        v = (None, None, None)
        with counter.paused():
            if res.diverged:
                elbo = float("nan")
            elif glm:
                elbo = -obj.full_objective(w, cfg.elbo_samples, st["elbo"].child(it))
            else:
                elbo = evaluate_elbo(obj, w, cfg.elbo_samples, st["elbo"].child(it))
                if cfg.var_every and it % cfg.var_every == 0:
                    dec = decompose_variance(obj, w, st["var"].child(it), S=cfg.var_samples,
                                             partition=cfg.partition)
                    v = (dec.v_joint, dec.v_subsampling, dec.v_mc)
        res.records.append(TraceRecord(it, it // per_epoch, float(elbo), *v, counter.grad_calls,
                                       counter.hvp_calls, cfg.step_size, cfg.seed))

    it = 0
    record(0, w)
    smiso = None
    estimator = None
    opt = None
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            if cfg.estimator == "smiso":
                smiso = SmisoState.start(w, obj.N, SMISO_ALPHA, cfg.step_size)
            else:
                opt = make_optimizer(cfg.optimizer, cfg.step_size)
            table = None
            if cfg.estimator in TABLE_ESTIMATORS and total > 0:
                init_iters = min(per_epoch, total)
                if init_iters < per_epoch:
                    raise ValueError(f"{cfg.estimator} needs at least one epoch ({per_epoch} iterations) "
                                     "to initialize its table")

                def on_step(t, w_t):
                    if t % eval_every == 0 or t == total:
                        record(t, w_t)

                init = init_glm_table if glm else init_table
                w, table, used = init(obj, w, opt, schedule, st["eps"], it, callback=on_step)
                it += used
            if glm:
                estimator = {"naive": lambda: GlmEstimator(obj), "cv": lambda: GlmCVEstimator(obj),
                             "joint-saga": lambda: GlmJointEstimator(obj, table)}[cfg.estimator]()
            elif cfg.estimator != "smiso":
                estimator = make_estimator(cfg.estimator, obj, table, cfg.beta,
                                           cfg.svrg_k if cfg.svrg_k is not None else per_epoch)
            while it < total:
                batch = schedule.next_batch()
                eps = noise(it, batch.size)
                if smiso is not None:
                    w = smiso_step(smiso, batch, eps, obj)
                else:
                    w = opt.step(w, estimator(w, batch, eps))
                if not glm and not np.all(np.isfinite(w.flatten())):
                    raise FloatingPointError("non-finite parameters")
                if glm and not np.all(np.isfinite(w)):
                    raise FloatingPointError("non-finite parameters")
                it += 1
                if it % eval_every == 0 or it == total:
                    record(it, w)
            res.table = table
        except (FloatingPointError, OverflowError) as exc:
            res.diverged = True
            _fill_diverged(res, it, total, eval_every, per_epoch, counter, cfg, exc)
        except ValueError as exc:
            if "finite" not in str(exc):
                raise
            res.diverged = True
            _fill_diverged(res, it, total, eval_every, per_epoch, counter, cfg, exc)
    res.w = w
    return res


def _fill_diverged(res, it, total, eval_every, per_epoch, counter, cfg, exc):
    """Pad the trace with NaN ELBO rows so every cell of a sweep has the same evaluation points."""
    done = {r.iteration for r in res.records}
    points = [t for t in range(1, total + 1) if (t % eval_every == 0 or t == total)]
    for t in points:
        if t not in done and t >= it:
            res.records.append(TraceRecord(t, t // per_epoch, float("nan"), None, None, None,
                                           counter.grad_calls, counter.hvp_calls, cfg.step_size, cfg.seed))


def trace_text(records) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(TraceRecord.FIELDS)
    for r in records:
        out.writerow(r.row())
    return buf.getvalue()


def _atomic_write(path: str, text: str):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _cell_name(step_size: float, seed: int) -> str:
    return f"trace_lr{step_size!r}_seed{seed}.csv"


def run(cfg: RunConfig, path: str | None = None) -> str:
    """Run one configuration and write its trace; returns the trace path."""
    os.makedirs(cfg.out, exist_ok=True)
    obj = build_objective(cfg)
    res = simulate(cfg, obj)
    path = path or os.path.join(cfg.out, "trace.csv")
    _atomic_write(path, trace_text(res.records))
    if cfg.checkpoint and not isinstance(obj, DropoutGlmObjective) and not res.diverged:
        table = res.table if isinstance(res.table, ParamTable) else None
        write_checkpoint(cfg.checkpoint, res.w, table,
                         {"task": cfg.task, "N": obj.N, "d": obj.d, "estimator": cfg.estimator})
    return path


# --- sweep --------------------------------------------------------------------------

def _sweep_cell(args):
    cfg, step_size, seed = args
    cell = replace(cfg, step_size=step_size, seed=seed, grid=(), checkpoint=None)
    res = simulate(cell)
    path = os.path.join(cfg.out, _cell_name(step_size, seed))
    _atomic_write(path, trace_text(res.records))
    return step_size, seed, res.records, res.diverged


def retrospective_best(curves: dict) -> tuple[np.ndarray, list]:
    """Pointwise max over step sizes of seed-averaged ELBO curves (NaN means diverged)."""
    keys = sorted(curves)
    M = np.vstack([curves[k] for k in keys])
    filled = np.where(np.isnan(M), -np.inf, M)
    arg = filled.argmax(axis=0)
    best = filled[arg, np.arange(M.shape[1])]
    return np.where(np.isinf(best), np.nan, best), [keys[a] for a in arg]


def sweep(cfg: RunConfig) -> dict:
    grid = cfg.grid or (cfg.step_size,)
    if not grid:
        raise ValueError("grid must be non-empty")
    os.makedirs(cfg.out, exist_ok=True)
    seeds = [cfg.seed + s for s in range(max(1, cfg.seeds))]
    jobs = [(cfg, lr, s) for lr in grid for s in seeds]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if cfg.jobs > 1:
            with ProcessPoolExecutor(cfg.jobs) as pool:
                results = list(pool.map(_sweep_cell, jobs))
        else:
            results = [_sweep_cell(j) for j in jobs]
    by_lr: dict = {}
    for lr, seed, records, diverged in results:
        by_lr.setdefault(lr, []).append((seed, records, diverged))
    iters = [r.iteration for r in results[0][2]]
    epochs = [r.epoch for r in results[0][2]]
    curves, summary = {}, []
    for lr in sorted(by_lr):
        runs = sorted(by_lr[lr], key=lambda t: t[0])
        E = np.vstack([[r.elbo for r in recs] for _, recs, _ in runs])
        curves[lr] = E.mean(axis=0)
        finals = E[:, -1]
        summary.append([repr(lr), repr(float(finals.mean())),
                        repr(float(finals.std(ddof=1))) if len(finals) > 1 else "",
                        str(len(runs)), str(sum(d for _, _, d in runs))])
    best, which = retrospective_best(curves)
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["step_size", "final_elbo_mean", "final_elbo_std", "n_seeds", "n_diverged"])
    out.writerows(summary)
    _atomic_write(os.path.join(cfg.out, "summary.csv"), buf.getvalue())
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["iteration", "epoch", "best_elbo", "best_step_size"])
    for t, e, b, lr in zip(iters, epochs, best, which):
        out.writerow([t, e, repr(float(b)), repr(lr)])
    _atomic_write(os.path.join(cfg.out, "best.csv"), buf.getvalue())
    return {"iterations": np.array(iters), "curves": curves, "best": best, "best_step": which}


# --- decompose ----------------------------------------------------------------------

DECOMPOSE_ESTIMATORS = ("naive", "cv", "inc", "ensemble", "joint-saga")


def decompose(cfg: RunConfig, S: int | None = None) -> dict:
    """Variance decomposition plus per-estimator variances at a checkpointed point."""
    if not cfg.checkpoint:
        raise ValueError("decompose needs --checkpoint")
    if cfg.task == "glm-dropout":
        raise ValueError("decompose is defined for the variational tasks")
    obj = build_objective(cfg)
    ck = read_checkpoint(cfg.checkpoint)
    if ck.w.d != obj.d:
        raise ValueError(f"checkpoint dimension {ck.w.d} does not match model dimension {obj.d}")
    if ck.entries is not None and ck.entries.shape[0] != obj.N:
        raise ValueError(f"checkpoint table has {ck.entries.shape[0]} entries, dataset has {obj.N}")
    w = ck.w
    table = ck.table(obj)
    if table is None:
        table = ParamTable.synced(obj, w)
    S = S or cfg.var_samples
    rng = RngStream(cfg.seed, 6)
    row = {}
    with obj.counter.paused():
        dec = decompose_variance(obj, w, rng.child(0), S=S, partition=cfg.partition)
        row.update(v_joint=dec.v_joint, se_joint=dec.se_joint, v_sub=dec.v_subsampling,
                   se_sub=dec.se_subsampling, v_mc=dec.v_mc, se_mc=dec.se_mc)
        for name in DECOMPOSE_ESTIMATORS:
            est = make_estimator(name, obj, table, cfg.beta)
            ve = estimator_variance(est, w, S, rng.child(1), cfg.partition)
            key = name.replace("-", "_")
            row[f"var_{key}"] = ve.value
            row[f"se_{key}"] = ve.se
    os.makedirs(cfg.out, exist_ok=True)
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(list(row))
    out.writerow([repr(float(v)) for v in row.values()])
    _atomic_write(os.path.join(cfg.out, "decompose.csv"), buf.getvalue())
    return row


# --- synth --------------------------------------------------------------------------

def synth(cfg: RunConfig, path: str) -> Dataset:
    if cfg.task == "glm-dropout" and cfg.glm_loss == "squared" and cfg.classes != 1:
        raise ValueError("CSV output holds one target column; use --classes 1 for squared-error data")
    ds = load_dataset(replace(cfg, data=None))
    save_csv(ds, path)
    return ds


# --- argument parsing ---------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointcv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config")
    for flag, kw in [
        ("--task", dict(choices=TASKS)),
        ("--estimator", dict(choices=ESTIMATORS)),
        ("--optimizer", dict(choices=("sgd", "adam", "smiso"))),
        ("--step-size", dict(type=float)),
        ("--grid", dict(help="comma-separated step sizes, or 'sgd' / 'adam' for the default grids")),
        ("--batch-size", dict(type=int)),
        ("--iters", dict(type=int)),
        ("--epochs", dict(type=int)),
        ("--eval-every", dict(type=int)),
        ("--var-every", dict(type=int)),
        ("--elbo-samples", dict(type=int)),
        ("--var-samples", dict(type=int)),
        ("--seed", dict(type=int)),
        ("--seeds", dict(type=int)),
        ("--svrg-k", dict(type=int)),
        ("--beta", dict(type=float)),
        ("--out", {}),
        ("--data", {}),
        ("--label-column", {}),
        ("--standardize", dict(action="store_const", const=True)),
        ("--data-seed", dict(type=int)),
        ("--n", dict(type=int)),
        ("--dim", dict(type=int)),
        ("--classes", dict(type=int)),
        ("--tau", dict(type=float)),
        ("--glm-loss", dict(choices=("squared", "softmax"))),
        ("--dropout-sigma", dict(type=float)),
        ("--checkpoint", {}),
        ("--partition", dict(choices=("all", "mu", "log_sigma"))),
        ("--per-datum-noise", dict(action="store_const", const=True)),
        ("--jobs", dict(type=int)),
    ]:
        common.add_argument(flag, default=None, **kw)
    for name, help_ in [("run", "single optimization run"), ("sweep", "step-size grid x seeds"),
                        ("decompose", "variance table at a checkpoint"),
                        ("synth", "write a synthetic dataset to CSV")]:
        sub.add_parser(name, parents=[common], help=help_)
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    values = read_config_file(ns.config) if ns.config else {}
    for f in fields(RunConfig):
        v = getattr(ns, f.name, None)
        if v is not None:
            values[f.name] = _coerce(f.name, v)
    return RunConfig(**values)


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    try:
        cfg = config_from_args(ns)
        if ns.command == "run":
            print(run(cfg))
        elif ns.command == "sweep":
            sweep(cfg)
            print(os.path.join(cfg.out, "best.csv"))
        elif ns.command == "decompose":
            row = decompose(cfg)
            print(",".join(f"{k}={v:.6g}" for k, v in row.items()))
        else:
            path = cfg.out if cfg.out.endswith(".csv") else os.path.join(cfg.out, "data.csv")
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            synth(cfg, path)
            print(path)
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
