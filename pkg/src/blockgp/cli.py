"""Command-line entry point: ``blockgp <command> [options]``.

Exit codes: 0 success, 2 invalid input or usage, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import io
from .composite import METHODS, fit_composite
from .conditional import build_cache, projection_oracle
from .design import Partition, generate_slhd, partition_dataset
from .experiments import ExperimentConfig, run_approx_study, run_schwefel_study, run_table_study
from .gp import Dataset, FitOptions, GpParams, blup_batch, fit_mle, sample_gp
from .kernel import CONSTANT, NumericalError, ValidationError
from .predict import predict_batch

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master random seed")
    common.add_argument("--threads", type=int, default=None, help="worker processes for replications")
    common.add_argument("--out", default=None, help="output file or directory (default: stdout)")
    common.add_argument("--config", default=None, help="YAML/JSON file of ExperimentConfig keys")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="blockgp", description="Block composite inference for Gaussian processes")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("slhd", parents=[common], help="generate a sliced Latin hypercube design")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--lower", type=float, default=0.0)
    p.add_argument("--upper", type=float, default=1.0)

    p = sub.add_parser("simulate", parents=[common], help="sample GP responses at design points")
    p.add_argument("--design", required=True, help="CSV with x1..xp [,slice]")
    p.add_argument("--phi", type=_floats, required=True)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--beta", type=_floats, default=[0.0])

    p = sub.add_parser("fit", parents=[common], help="estimate parameters")
    p.add_argument("--method", choices=("ML",) + METHODS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--partition", choices=("by-slice-labels", "random", "round-robin-sorted"), default=None,
                   help="default: slice labels when present, otherwise random")
    p.add_argument("--block-order", type=_ints, default=None, help="permutation of blocks (0-based)")
    p.add_argument("--n-starts", type=int, default=5)
    p.add_argument("--no-timing", action="store_true", help="omit wall time from the model JSON")

    p = sub.add_parser("predict", parents=[common], help="predict at new points")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--predictor", choices=("auto", "blup", "blubp", "cl"), default="auto")
    p.add_argument("--block-order", type=_ints, default=None)

    p = sub.add_parser("approx-study", parents=[common], help="BLUP/BLUBP/CL curves at true parameters")
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("table-study", parents=[common], help="replicated bias/MSE study")
    p.add_argument("--scenario", choices=("1d", "2d"), default="1d")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--methods", default=None, help="comma-separated subset of ML,CI,CML,CCL")
    p.add_argument("--record-timing", action="store_true")

    p = sub.add_parser("schwefel-study", parents=[common], help="Schwefel surrogate case study")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--methods", default=None)
    p.add_argument("--allow-full-scale", action="store_true")
    p.add_argument("--record-timing", action="store_true")

    # hidden: exposes the projection oracle for debugging
    p = sub.add_parser("debug-oracle", parents=[common])
    p.add_argument("--x", type=_floats, required=True)
    p.add_argument("--xi", type=_floats, required=True)
    p.add_argument("--xj", type=_floats, required=True)
    p.add_argument("--phi", type=_floats, required=True)
    return parser


def _emit_text(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise ValidationError(f"cannot read config {path}: {err}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a flat key/value mapping")
    return doc


def _study_config(args, scenario: str, **overrides) -> ExperimentConfig:
    base = _load_config(args.config)
    scenario = base.pop("scenario", scenario)
    flags = {"seed": args.seed, "threads": args.threads, "out": args.out, **overrides}
    base.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig.from_scenario(scenario, **base)


def _partition(ds: Dataset, k: Optional[int], strategy: Optional[str], seed, order) -> Partition:
    if strategy is None:
        strategy = "by-slice-labels" if ds.slice_of is not None else "random"
    if k is None:
        if strategy != "by-slice-labels":
            raise ValidationError("--k is required unless blocks come from slice labels")
        k = len(np.unique(ds.slice_of))
    part = partition_dataset(ds, k, strategy, seed)
    return part.reordered(order) if order is not None else part


def cmd_slhd(args) -> None:
    d = generate_slhd(args.k, args.m, args.p, seed=args.seed or 0)
    X = d.scaled(args.lower, args.upper)
    header = [f"x{j + 1}" for j in range(d.p)] + ["slice"]
    rows = [[*x, int(s)] for x, s in zip(X.tolist(), d.slice_of)]
    _emit_text(io.csv_text(header, rows), args.out)


def cmd_simulate(args) -> None:
    header, data = io.read_table(args.design)
    X = io.read_points(args.design)
    labels = data[:, header.index("slice")].astype(np.int64) if "slice" in header else None
    params = GpParams(args.beta, args.sigma2, args.phi)
    y = sample_gp(X, params, CONSTANT, seed=args.seed or 0)
    ds = Dataset(X, y, labels)
    cols = [f"x{j + 1}" for j in range(ds.p)] + ["y"] + (["slice"] if labels is not None else [])
    rows = [[*x, yy] + ([int(s)] if labels is not None else []) for x, yy, s in
            zip(X.tolist(), y, labels if labels is not None else [None] * ds.n)]
    _emit_text(io.csv_text(cols, rows), args.out)


def cmd_fit(args) -> None:
    ds = io.read_dataset(args.data)
    seed = args.seed or 0
    opts = FitOptions(n_starts=args.n_starts, seed=seed)
    if args.method == "ML":
        model = fit_mle(ds, CONSTANT, opts)
    else:
        part = _partition(ds, args.k, args.partition, seed, args.block_order)
        model = fit_composite(ds, part, args.method, CONSTANT, opts)
    _emit_text(io.dumps(model.to_dict(timing=not args.no_timing)), args.out)


def cmd_predict(args) -> None:
    model = io.load_model(args.model)
    ds = io.read_dataset(args.data)
    Xs = io.read_points(args.points)
    predictor = args.predictor
    if predictor == "auto":
        predictor = {"ML": "blup", "CI": "blubp"}.get(model.method, "cl")
    if predictor == "blup":
        mean, var = blup_batch(model, ds, Xs)
        sd = np.sqrt(var)
    else:
        part = model.partition
        if part is None:
            raise ValidationError("block predictors need a model fitted with a partition")
        if args.block_order is not None:
            part = part.reordered(args.block_order)
        cache = build_cache(ds, part, model.params.phi, model.basis)
        out = predict_batch(model, cache, Xs, predictor)
        mean, sd = out.mean, out.sd
    header = [f"x{j + 1}" for j in range(Xs.shape[1])] + ["mean", "sd", "lo3", "hi3"]
    _emit_text(io.csv_text(header, io.prediction_rows(Xs, mean, sd)), args.out)


def _write_files(files: dict, out: Optional[str], main: str) -> None:
    if out:
        outdir = Path(out)
        outdir.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (outdir / name).write_text(text)
    else:
        sys.stdout.write(files[main])


def cmd_approx(args) -> None:
    cfg = _study_config(args, "approx", k=args.k)
    res = run_approx_study(cfg)
    _write_files(res.files(), cfg.out, "summary.json")


def cmd_table(args) -> None:
    cfg = _study_config(args, args.scenario, reps=args.reps, methods=args.methods,
                        record_timing=args.record_timing or None)
    _write_files(run_table_study(cfg).files(), cfg.out, "report.json")


def cmd_schwefel(args) -> None:
    cfg = _study_config(args, "schwefel", n=args.n, k=args.k, methods=args.methods,
                        allow_full_scale=args.allow_full_scale or None, record_timing=args.record_timing or None)
    _write_files(run_schwefel_study(cfg).files(), cfg.out, "report.json")


def cmd_debug_oracle(args) -> None:
    p = len(args.phi)
    x = np.array(args.x).reshape(1, p)
    Xi = np.array(args.xi).reshape(-1, p)
    Xj = np.array(args.xj).reshape(-1, p)
    mean_i, mean_j, cov, var_i, var_j = projection_oracle(x, Xi, Xj, args.phi)
    _emit_text(io.dumps({"cov_ij": cov, "var_i": var_i, "var_j": var_j}), args.out)


COMMANDS = {
    "slhd": cmd_slhd,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "approx-study": cmd_approx,
    "table-study": cmd_table,
    "schwefel-study": cmd_schwefel,
    "debug-oracle": cmd_debug_oracle,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
