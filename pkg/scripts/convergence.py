"""Compare estimators by retrospective-best ELBO over a step-size grid.

    python scripts/convergence.py --task logistic --n 1000 --dim 20 --epochs 20 --out runs/conv
"""

import argparse
import os

import numpy as np

from jointcv import cli


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--task", default="logistic", choices=cli.TASKS)
    p.add_argument("--estimators", default="naive,cv,joint-saga")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--grid", default="sgd")
    p.add_argument("--elbo-samples", type=int, default=100)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default="runs/convergence")
    a = p.parse_args()

    results = {}
    for est in a.estimators.split(","):
        cfg = cli.make_config(task=a.task, estimator=est, n=a.n, dim=a.dim, batch_size=a.batch_size,
                              epochs=a.epochs, seeds=a.seeds, grid=a.grid, elbo_samples=a.elbo_samples,
                              jobs=a.jobs, out=os.path.join(a.out, est))
        results[est] = cli.sweep(cfg)
        print(f"{est}: best final step size {results[est]['best_step'][-1]!r}")

    names = list(results)
    iters = next(iter(results.values()))["iterations"]
    print("\niteration " + " ".join(f"{n:>12}" for n in names))
    for i, it in enumerate(iters):
        print(f"{it:9d} " + " ".join(f"{results[n]['best'][i]:12.3f}" for n in names))
    ref = names[-1]
    for n in names[:-1]:
        ahead = np.mean(results[ref]["best"][1:] >= results[n]["best"][1:])
        print(f"{ref} >= {n} at {100 * ahead:.0f}% of evaluation points after the first")


if __name__ == "__main__":
    main()
