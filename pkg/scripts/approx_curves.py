"""Write BLUP, BLUBP and CL-predictor curves for 16 SLHD points at k = 4 and 8.

    python scripts/approx_curves.py --out results/approx --seeds 20
"""
import argparse
import json
from pathlib import Path

from blockgp.experiments import ExperimentConfig, run_approx_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/approx")
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    summary = {}
    for k in (4, 8):
        wins = 0
        for seed in range(args.seeds):
            res = run_approx_study(ExperimentConfig.from_scenario("approx", k=k, seed=seed))
            if seed == 0:
                res.write(Path(args.out) / f"k{k}")
            d = res.summary["mean_abs_diff_to_blup"]
            wins += d["blubp"] < d["cl"]
        summary[f"k={k}"] = f"BLUBP closer to BLUP than CL in {wins}/{args.seeds} seeds"
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
