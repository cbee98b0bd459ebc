"""Schwefel surrogate comparison: CI + BLUBP against CML/CCL + CL predictor.

    python scripts/schwefel_study.py --out results/schwefel
"""
import argparse

from blockgp.experiments import ExperimentConfig, run_schwefel_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None)
    ap.add_argument("--n", type=int, default=None)
    ap.add_argument("--k", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ExperimentConfig.from_scenario("schwefel", n=args.n, k=args.k, seed=args.seed, record_timing=True)
    report = run_schwefel_study(cfg)
    if args.out:
        report.write(args.out)
    mse = report.extra["prediction_mse"]
    for m in report.methods:
        print(f"{m:4s} test MSE {mse[m]:.4f}   fit+predict {report.wall_times[m][0]:7.1f} s")


if __name__ == "__main__":
    main()
