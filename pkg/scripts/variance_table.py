"""Gradient variance of each estimator at points along a joint-saga SGD run.

Prints the subsampling and Monte Carlo variance floors next to the
single-datum variance of every estimator, using the run's own parameter table.

    python scripts/variance_table.py --n 200 --dim 10 --epochs 40 --partition mu
"""

import argparse

import numpy as np

from jointcv.core import RngStream, VariationalParams, draw_standard_normal
from jointcv.data import MinibatchSchedule, synth_logistic
from jointcv.diagnostics import estimate_mc_variance, estimate_subsampling_variance, estimator_variance
from jointcv.estimators import ESTIMATOR_NAMES, JointSagaEstimator, init_table, make_estimator
from jointcv.models import LogisticRegressionModel
from jointcv.objective import ReparamObjective
from jointcv.optimizers import SGD


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--points", type=int, default=4)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--partition", default="mu", choices=("all", "mu", "log_sigma"))
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    ds = synth_logistic(a.n, a.dim, a.seed)
    obj = ReparamObjective(LogisticRegressionModel(ds.features, ds.labels))
    w = VariationalParams(RngStream(a.seed, 1).generator().standard_normal(a.dim), np.zeros(a.dim))
    opt = SGD(a.step_size)
    sched = MinibatchSchedule(obj.N, a.batch_size, RngStream(a.seed, 2))
    eps_stream = RngStream(a.seed, 3)
    w, table, it = init_table(obj, w, opt, sched, eps_stream)
    est = JointSagaEstimator(obj, table)
    total = a.epochs * sched.batches_per_epoch
    stops = set(np.linspace(total / a.points, total, a.points).astype(int))

    cols = ["v_sub", "v_mc", *ESTIMATOR_NAMES]
    print("iteration " + " ".join(f"{c:>11}" for c in cols))
    while it < total:
        w = opt.step(w, est(w, sched.next_batch(), draw_standard_normal(eps_stream.child(it), a.dim)))
        it += 1
        if it not in stops:
            continue
        rng = RngStream(a.seed, 5).child(it)
        row = [estimate_subsampling_variance(obj, w, 64, rng.child(0), a.partition).value,
               estimate_mc_variance(obj, w, 1000, rng.child(1), a.partition).value]
        for k, name in enumerate(ESTIMATOR_NAMES):
            e = make_estimator(name, obj, table.copy())
            if name == "joint-svrg":
                e.refresh(w)
            row.append(estimator_variance(e, w, a.samples, rng.child(2 + k), a.partition).value)
        print(f"{it:9d} " + " ".join(f"{v:11.4g}" for v in row))


if __name__ == "__main__":
    main()
