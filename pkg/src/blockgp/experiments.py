"""Simulation studies: predictor approximation curves, replicated bias/MSE
tables and the Schwefel surrogate case study."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .composite import fit_composite
from .conditional import build_cache
from .design import Partition, generate_slhd, make_rng, partition_dataset
from .gp import Dataset, FitOptions, GpParams, blup_batch, fit_mle, sample_gp
from .io import csv_text, dumps, prediction_rows
from .kernel import CONSTANT, NumericalError, ValidationError
from .predict import predict_batch

log = logging.getLogger(__name__)

ALL_METHODS = ("ML", "CI", "CML", "CCL")
# estimator -> predictor used with its parameters
PIPELINES = {"ML": "blup", "CI": "blubp", "CML": "cl", "CCL": "cl"}
FULL_SCALE_N = 20000


def schwefel(x) -> np.ndarray | float:
    """-sum_i x_i sin(sqrt(|1000 x_i|)) on the open cube (-1, 1)^p."""
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(np.abs(arr) >= 1.0):
        raise ValidationError("schwefel inputs must satisfy |x_i| < 1")
    vals = -np.sum(arr * np.sin(np.sqrt(np.abs(1000.0 * arr))), axis=-1)
    return float(vals) if np.ndim(vals) == 0 else vals


@dataclass
class ExperimentConfig:
    """Settings for one study; ``grid`` counts test points per dimension for
    the 2-D table study and in total otherwise."""

    scenario: str = "1d"
    n: int = 100
    k: int = 10
    p: int = 1
    beta: tuple = (0.0,)
    sigma2: float = 1.0
    phi: tuple = (2.0,)
    reps: int = 200
    lower: float = 0.0
    upper: float = 100.0
    grid: int = 1000
    seed: int = 0
    methods: tuple = ALL_METHODS
    out: Optional[str] = None
    threads: int = 1
    n_starts: int = 5
    dense_cap: int = 5000
    record_timing: bool = False
    allow_full_scale: bool = False

    def __post_init__(self):
        self.beta = tuple(float(b) for b in np.atleast_1d(self.beta))
        self.phi = tuple(float(v) for v in np.atleast_1d(self.phi))
        if isinstance(self.methods, str):
            self.methods = tuple(m.strip() for m in self.methods.split(",") if m.strip())
        self.methods = tuple(self.methods)
        self.validate()

    def validate(self) -> None:
        if self.reps < 1:
            raise ValidationError("replication count must be >= 1")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad or not self.methods:
            raise ValidationError(f"methods must be drawn from {ALL_METHODS}, got {self.methods}")
        if min(self.n, self.k, self.p) < 1 or self.n % self.k:
            raise ValidationError(f"need n divisible by k, got n={self.n}, k={self.k}")
        if len(self.phi) != self.p or min(self.phi) <= 0:
            raise ValidationError(f"phi must hold {self.p} positive values")
        if self.sigma2 <= 0 or not self.upper > self.lower:
            raise ValidationError("need sigma2 > 0 and upper > lower")
        if self.threads < 1 or self.n_starts < 1 or self.grid < 1:
            raise ValidationError("threads, n_starts and grid must be >= 1")

    @property
    def m(self) -> int:
        return self.n // self.k

    def params(self) -> GpParams:
        return GpParams(np.array(self.beta), self.sigma2, np.array(self.phi))

    def fit_options(self, seed) -> FitOptions:
        return FitOptions(n_starts=self.n_starts, seed=seed, dense_cap=self.dense_cap)

    def ml_feasible(self) -> bool:
        return self.n <= self.dense_cap

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"], d["phi"], d["methods"] = list(self.beta), list(self.phi), list(self.methods)
        return d

    @classmethod
    def from_scenario(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in SCENARIOS:
            raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        base = dict(SCENARIOS[name])
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(base)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        try:
            return cls(**mapping)
        except TypeError as err:
            raise ValidationError(str(err)) from None


SCENARIOS = {
    "1d": dict(scenario="1d", n=100, k=10, p=1, phi=(2.0,), lower=0.0, upper=100.0, grid=1000, reps=200),
    "2d": dict(scenario="2d", n=100, k=10, p=2, phi=(2.0, 2.0), lower=0.0, upper=10.0, grid=40, reps=200),
    "approx": dict(scenario="approx", n=16, k=4, p=1, phi=(1.0,), lower=0.0, upper=16.0, grid=1000, reps=1,
                   methods=("CI",)),
    "schwefel": dict(scenario="schwefel", n=2000, k=20, p=4, phi=(1.0,) * 4, lower=-1.0, upper=1.0, grid=4000,
                     reps=1, methods=("CI", "CML", "CCL"), n_starts=2),
}

# Reference values at full scale, method -> parameter -> (bias, mse)
REFERENCE = {
    "1d": {
        "ML": {"phi1": (0.1268, 0.3577), "beta1": (-0.0015, 0.0143), "sigma2": (-0.0145, 0.0230)},
        "CI": {"phi1": (0.1264, 0.3585), "beta1": (-0.0016, 0.0143), "sigma2": (-0.0144, 0.0230)},
        "CML": {"phi1": (-0.0118, 1.0000), "beta1": (-0.0015, 0.0150), "sigma2": (-0.0144, 0.0243)},
        "CCL": {"phi1": (0.1536, 0.4235), "beta1": (-0.0015, 0.0148), "sigma2": (-0.0145, 0.0239)},
    },
    "2d": {
        "ML": {"phi1": (0.0632, 0.3519), "phi2": (0.0542, 0.3505), "beta1": (-0.0004, 0.0197),
               "sigma2": (-0.0101, 0.0286)},
        "CI": {"phi1": (0.0732, 0.3923), "phi2": (0.0648, 0.3953), "beta1": (-0.0006, 0.0200),
               "sigma2": (-0.0117, 0.0288)},
        "CML": {"phi1": (0.5851, 1.2744), "phi2": (0.5821, 1.2735), "beta1": (-0.0003, 0.0230),
                "sigma2": (-0.0201, 0.0325)},
        "CCL": {"phi1": (0.1789, 0.6762), "phi2": (0.1778, 0.6803), "beta1": (-0.0003, 0.0216),
                "sigma2": (-0.0179, 0.0310)},
    },
    # mean squared prediction error at n = 100000, k = 200
    "schwefel": {"CI": 0.1605, "CML": 0.7864, "CCL": 0.7863},
}


@dataclass
class MetricsReport:
    """Per-replication estimates and prediction errors with their summaries."""

    scenario: str
    methods: tuple
    param_names: tuple
    truth: Optional[np.ndarray]  # None when there are no true parameters
    estimates: dict  # method -> (R, P)
    rmse: dict  # method -> (R,)
    reps: list  # replication indices that succeeded
    failures: list = field(default_factory=list)  # (rep, message)
    infeasible: tuple = ()
    wall_times: Optional[dict] = None
    reference: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def bias(self, method: str) -> np.ndarray:
        return np.mean(self.estimates[method] - self.truth, axis=0)

    def mse(self, method: str) -> np.ndarray:
        return np.mean((self.estimates[method] - self.truth) ** 2, axis=0)

    def table(self) -> list[dict]:
        """Bias/MSE rows, or mean estimates when the truth is unknown."""
        rows = []
        for j, name in enumerate(self.param_names):
            for m in self.methods:
                if m in self.infeasible or not len(self.reps):
                    continue
                if self.truth is None:
                    rows.append({"param": name, "method": m, "estimate": float(np.mean(self.estimates[m][:, j]))})
                else:
                    rows.append({"param": name, "true": float(self.truth[j]), "method": m,
                                 "bias": float(self.bias(m)[j]), "mse": float(self.mse(m)[j])})
        return rows

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "methods": list(self.methods),
            "params": list(self.param_names),
            "truth": None if self.truth is None else self.truth.tolist(),
            "replications": len(self.reps),
            "failures": len(self.failures),
            "failed": [{"rep": r, "error": msg} for r, msg in self.failures],
            "infeasible": {m: "infeasible: dense likelihood exceeds the memory cap" for m in self.infeasible},
            "table": self.table(),
            "rmse_mean": {m: float(np.mean(v)) for m, v in self.rmse.items() if len(v)},
        }
        if self.reference is not None:
            out["reference"] = self.reference
        if self.extra:
            out.update(self.extra)
        if self.wall_times is not None:
            out["wall_time_mean_s"] = {m: float(np.mean(v)) for m, v in self.wall_times.items() if len(v)}
        return out

    def files(self) -> dict[str, str]:
        """File name -> text for every artifact of the report."""
        est_rows = []
        rmse_rows = []
        for t, rep in enumerate(self.reps):
            for m in self.methods:
                if m in self.infeasible:
                    continue
                est_rows.append([rep, m, *self.estimates[m][t]])
                rmse_rows.append([rep, m, self.rmse[m][t]])
        files = {
            "report.json": dumps(self.to_dict()),
            "estimates.csv": csv_text(["rep", "method", *self.param_names], est_rows),
            "rmse.csv": csv_text(["rep", "method", "rmse"], rmse_rows),
            "table.csv": csv_text(
                ["param", "method", "estimate"] if self.truth is None else ["param", "true", "method", "bias", "mse"],
                [list(r.values()) for r in self.table()]),
        }
        if self.wall_times is not None:
            rows = [[rep, m, self.wall_times[m][t]] for t, rep in enumerate(self.reps)
                    for m in self.methods if m not in self.infeasible]
            files["timing.csv"] = csv_text(["rep", "method", "wall_time_s"], rows)
        return files

    def write(self, outdir) -> Path:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for name, text in self.files().items():
            (outdir / name).write_text(text)
        return outdir


def _param_names(p: int, q: int) -> tuple:
    return tuple([f"phi{j + 1}" for j in range(p)] + [f"beta{j + 1}" for j in range(q)] + ["sigma2"])


def _flatten(params: GpParams) -> np.ndarray:
    return np.concatenate([params.phi, params.beta, [params.sigma2]])


def grid_points(cfg: ExperimentConfig) -> np.ndarray:
    """Equally spaced test points over the scenario's domain."""
    axis = np.linspace(cfg.lower, cfg.upper, cfg.grid)
    if cfg.p == 1:
        return axis[:, None]
    if cfg.p == 2:
        g1, g2 = np.meshgrid(axis, axis, indexing="ij")
        return np.column_stack([g1.ravel(), g2.ravel()])
    raise ValidationError("equally spaced grids are provided for 1-D and 2-D scenarios only")


def fit_method(method: str, ds: Dataset, part: Partition, opts: FitOptions):
    if method == "ML":
        return fit_mle(ds, CONSTANT, opts)
    return fit_composite(ds, part, method, CONSTANT, opts)


def predict_method(method: str, model, ds: Dataset, part: Partition, Xstar: np.ndarray):
    """(mean, sd) from the predictor paired with ``method``'s estimator."""
    if method == "ML":
        mean, var = blup_batch(model, ds, Xstar)
        return mean, np.sqrt(var)
    cache = build_cache(ds, part, model.params.phi, CONSTANT)
    out = predict_batch(model, cache, Xstar, PIPELINES[method])
    return out.mean, out.sd


# ----------------------------------------------------------------------------
# approximation curves

@dataclass
class ApproxResult:
    grid: np.ndarray
    data: Dataset
    partition: Partition
    curves: dict  # name -> (mean, sd)
    summary: dict

    def files(self) -> dict[str, str]:
        out = {}
        for name, (mean, sd) in self.curves.items():
            out[f"{name}.csv"] = csv_text(["x", "mean", "sd", "lo3", "hi3"], prediction_rows(self.grid, mean, sd))
        rows = [[*x, y, b] for x, y, b in zip(self.data.X.tolist(), self.data.y, self.partition.labels())]
        out["data.csv"] = csv_text([*(f"x{j + 1}" for j in range(self.data.p)), "y", "block"], rows)
        out["summary.json"] = dumps(self.summary)
        return out

    def write(self, outdir) -> Path:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for name, text in self.files().items():
            (outdir / name).write_text(text)
        return outdir


def run_approx_study(cfg: ExperimentConfig) -> ApproxResult:
    """BLUP, BLUBP and CL-predictor curves at the true parameters."""
    if cfg.p != 1:
        raise ValidationError("the approximation study is 1-D")
    params = cfg.params()
    design = generate_slhd(cfg.k, cfg.m, 1, seed=(cfg.seed, 0))
    X = design.scaled(cfg.lower, cfg.upper)
    y = sample_gp(X, params, CONSTANT, seed=(cfg.seed, 1))
    ds = Dataset(X, y, design.slice_of)
    part = partition_dataset(ds, cfg.k, "by-slice-labels")
    grid = grid_points(cfg)
    cache = build_cache(ds, part, params.phi, CONSTANT)
    m_blup, v_blup = blup_batch(params, ds, grid)
    curves = {"blup": (m_blup, np.sqrt(v_blup))}
    for name in ("blubp", "cl"):
        out = predict_batch(params, cache, grid, name)
        curves[name] = (out.mean, out.sd)
    summary = {
        "k": cfg.k,
        "n": cfg.n,
        "seed": cfg.seed,
        "mean_abs_diff_to_blup": {name: float(np.mean(np.abs(curves[name][0] - m_blup))) for name in ("blubp", "cl")},
        "mean_abs_sd_diff_to_blup": {
            name: float(np.mean(np.abs(curves[name][1] - curves["blup"][1]))) for name in ("blubp", "cl")
        },
    }
    return ApproxResult(grid, ds, part, curves, summary)


# ----------------------------------------------------------------------------
# replicated tables

def _table_replication(cfg: ExperimentConfig, rep: int, methods: tuple):
    """One replication; returns (rep, estimates, rmse, times) or (rep, error)."""
    params = cfg.params()
    try:
        design = generate_slhd(cfg.k, cfg.m, cfg.p, seed=(cfg.seed, rep, 0))
        X = design.scaled(cfg.lower, cfg.upper)
        grid = grid_points(cfg)
        joint = sample_gp(np.vstack([X, grid]), params, CONSTANT, seed=(cfg.seed, rep, 1))
        y, truth = joint[: cfg.n], joint[cfg.n:]
        ds = Dataset(X, y, design.slice_of)
        part = partition_dataset(ds, cfg.k, "by-slice-labels")
        est, err, times = {}, {}, {}
        for i, method in enumerate(methods):
            t0 = time.perf_counter()
            model = fit_method(method, ds, part, cfg.fit_options((cfg.seed, rep, 2, i)))
            times[method] = time.perf_counter() - t0
            mean, _ = predict_method(method, model, ds, part, grid)
            est[method] = _flatten(model.params)
            err[method] = float(np.sqrt(np.mean((mean - truth) ** 2)))
        return rep, est, err, times
    except (NumericalError, ValidationError, np.linalg.LinAlgError) as exc:
        return rep, f"{type(exc).__name__}: {exc}"


def _run_reps(cfg: ExperimentConfig, methods: tuple):
    reps = range(cfg.reps)
    if cfg.threads == 1:
        return [_table_replication(cfg, r, methods) for r in reps]
    with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(_table_replication, [cfg] * cfg.reps, reps, [methods] * cfg.reps))


def run_table_study(cfg: ExperimentConfig) -> MetricsReport:
    """Replicated estimation and prediction for the 1-D or 2-D scenario."""
    infeasible = tuple(m for m in cfg.methods if m == "ML" and not cfg.ml_feasible())
    methods = tuple(m for m in cfg.methods if m not in infeasible)
    results = _run_reps(cfg, methods)
    names = _param_names(cfg.p, len(cfg.beta))
    ok = [r for r in results if len(r) == 4]
    failures = [(r[0], r[1]) for r in results if len(r) == 2]
    for rep, msg in failures:
        log.warning("replication %d failed: %s", rep, msg)
    P = len(names)
    estimates = {m: np.array([r[1][m] for r in ok]).reshape(len(ok), P) for m in methods}
    rmse = {m: np.array([r[2][m] for r in ok]) for m in methods}
    times = {m: np.array([r[3][m] for r in ok]) for m in methods} if cfg.record_timing else None
    return MetricsReport(
        scenario=cfg.scenario,
        methods=cfg.methods,
        param_names=names,
        truth=_flatten(cfg.params()),
        estimates=estimates,
        rmse=rmse,
        reps=[r[0] for r in ok],
        failures=failures,
        infeasible=infeasible,
        wall_times=times,
        reference=REFERENCE.get(cfg.scenario),
    )


# ----------------------------------------------------------------------------
# Schwefel case study

def schwefel_data(cfg: ExperimentConfig):
    """SLHD training set and an independent LHD test set on (-1, 1)^p."""
    design = generate_slhd(cfg.k, cfg.m, cfg.p, seed=(cfg.seed, 0))
    X = design.scaled(cfg.lower, cfg.upper)
    Xt = generate_slhd(1, cfg.grid, cfg.p, seed=(cfg.seed, 1)).scaled(cfg.lower, cfg.upper)
    ds = Dataset(X, schwefel(X), design.slice_of)
    return ds, Xt, schwefel(Xt)


def run_schwefel_study(cfg: ExperimentConfig) -> MetricsReport:
    """Fit each estimator to Schwefel function values and score its
    pipeline's predictions on an independent test design."""
    if cfg.n >= FULL_SCALE_N and not cfg.allow_full_scale:
        raise ValidationError(
            f"n={cfg.n} is full scale; set allow_full_scale to run it (ML is excluded there)"
        )
    if cfg.lower < -1 or cfg.upper > 1:
        raise ValidationError("the Schwefel domain is (-1, 1)^p")
    infeasible = tuple(m for m in cfg.methods if m == "ML" and not cfg.ml_feasible())
    methods = tuple(m for m in cfg.methods if m not in infeasible)
    ds, Xt, yt = schwefel_data(cfg)
    part = partition_dataset(ds, cfg.k, "by-slice-labels")
    est, err, times, mse = {}, {}, {}, {}
    for i, method in enumerate(methods):
        t0 = time.perf_counter()
        model = fit_method(method, ds, part, cfg.fit_options((cfg.seed, 2, i)))
        mean, _ = predict_method(method, model, ds, part, Xt)
        times[method] = np.array([time.perf_counter() - t0])
        est[method] = _flatten(model.params)[None]
        mse[method] = float(np.mean((mean - yt) ** 2))
        err[method] = np.array([math.sqrt(mse[method])])
        log.info("%s: mse %.6g (%.1fs)", method, mse[method], times[method][0])
    extra = {"prediction_mse": mse}
    if "CI" in mse:
        extra["ci_mse_ratio"] = {m: mse["CI"] / v for m, v in mse.items() if m != "CI" and v > 0}
    names = _param_names(cfg.p, len(cfg.beta))
    return MetricsReport(
        scenario=cfg.scenario,
        methods=cfg.methods,
        param_names=names,
        truth=None,
        estimates=est,
        rmse=err,
        reps=[0],
        infeasible=infeasible,
        wall_times=times if cfg.record_timing else None,
        reference={"reference_prediction_mse": REFERENCE["schwefel"], "reference_n": 100000, "reference_k": 200},
        extra=extra,
    )
