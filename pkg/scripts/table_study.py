"""Replicated bias/MSE study from a YAML config, printed as a table.

    python scripts/table_study.py scripts/configs/table_1d.yaml --out results/table_1d
"""
import argparse

import yaml

from blockgp.experiments import ExperimentConfig, run_table_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--reps", type=int, default=None)
    args = ap.parse_args()
    with open(args.config) as fh:
        conf = yaml.safe_load(fh)
    conf.update(threads=args.threads, **({"reps": args.reps} if args.reps else {}))
    cfg = ExperimentConfig.from_scenario(conf.pop("scenario"), **conf)
    report = run_table_study(cfg)
    if args.out:
        report.write(args.out)
    ref = report.reference or {}
    print(f"{'param':8s} {'method':6s} {'bias':>9s} {'mse':>9s}   reference bias/mse")
    for row in report.table():
        r = ref.get(row["method"], {}).get(row["param"])
        tail = f"   {r[0]:+.4f} / {r[1]:.4f}" if r else ""
        print(f"{row['param']:8s} {row['method']:6s} {row['bias']:+9.4f} {row['mse']:9.4f}{tail}")
    if report.failures:
        print(f"{len(report.failures)} replications failed")


if __name__ == "__main__":
    main()
