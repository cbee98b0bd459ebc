"""Exact dense Gaussian-process baseline: likelihood, MLE, BLUP and sampling."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .design import Partition, make_rng
from .kernel import (
    CONSTANT,
    BasisSpec,
    NumericalError,
    ValidationError,
    as_points,
    basis_matrix,
    check_phi,
    chol_logdet,
    chol_solve,
    cholesky,
    corr_matrix,
    jitter_for,
)

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    slice_of: Optional[np.ndarray] = None

    def __post_init__(self):
        X = as_points(self.X)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise ValidationError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if X.shape[0] == 0:
            raise ValidationError("empty dataset")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("non-finite values in dataset")
        if np.unique(X, axis=0).shape[0] != X.shape[0]:
            raise ValidationError("input points must be distinct")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.slice_of is not None:
            labels = np.asarray(self.slice_of, dtype=np.int64).ravel()
            if labels.size != y.size:
                raise ValidationError("slice labels not aligned with rows")
            object.__setattr__(self, "slice_of", labels)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.slice_of is None else self.slice_of[idx]
        return Dataset(self.X[idx], self.y[idx], labels)


@dataclass(frozen=True)
class GpParams:
    beta: np.ndarray
    sigma2: float
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "phi", check_phi(self.phi))
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValidationError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "sigma2", float(self.sigma2))


@dataclass
class FittedModel:
    params: GpParams
    method: str
    basis: BasisSpec = CONSTANT
    partition: Optional[Partition] = None
    objective: float = np.nan
    wall_time: float = 0.0
    converged: bool = True
    n_evals: int = 0

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "method": self.method,
            "beta": self.params.beta.tolist(),
            "sigma2": self.params.sigma2,
            "phi": self.params.phi.tolist(),
            "objective": float(self.objective),
        }
        if timing:
            out["wall_time_s"] = float(self.wall_time)
        out["converged"] = bool(self.converged)
        out["basis"] = self.basis.kind
        if self.partition is not None:
            out["k"] = self.partition.k
            out["block"] = self.partition.labels().tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        for key in ("method", "beta", "sigma2", "phi"):
            if key not in d:
                raise ValidationError(f"model document lacks {key!r}")
        basis = BasisSpec(d.get("basis", "constant"))
        part = Partition.from_labels(d["block"]) if "block" in d else None
        return cls(
            params=GpParams(d["beta"], d["sigma2"], d["phi"]),
            method=d["method"],
            basis=basis,
            partition=part,
            objective=float(d.get("objective", np.nan)),
            wall_time=float(d.get("wall_time_s", 0.0)),
            converged=bool(d.get("converged", True)),
        )


@dataclass
class PredictionResult:
    mean: float
    variance: float
    variance_raw: float
    weights: Optional[np.ndarray] = None
    block_means: Optional[np.ndarray] = None
    flagged: bool = False

    @property
    def sd(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass
class FitOptions:
    """Multi-start Nelder-Mead settings shared by every estimator."""

    n_starts: int = 5
    start_low: float = -3.0
    start_high: float = 3.0
    xatol: float = 1e-6
    max_iter_per_dim: int = 1000
    log_phi_bounds: tuple = (-10.0, 10.0)
    initial_step: float = 1.0
    seed: object = 0
    dense_cap: int = 5000
    trace: Optional[list] = field(default=None, repr=False)


def unpack(model, basis: Optional[BasisSpec] = None) -> tuple[GpParams, BasisSpec]:
    if isinstance(model, FittedModel):
        return model.params, basis or model.basis
    if isinstance(model, GpParams):
        return model, basis or CONSTANT
    raise ValidationError(f"expected FittedModel or GpParams, got {type(model).__name__}")


def full_loglik(ds: Dataset, params: GpParams, basis: BasisSpec = CONSTANT) -> float:
    """Gaussian log-likelihood without the -(n/2) log(2 pi) constant."""
    n = ds.n
    R = corr_matrix(ds.X, ds.X, check_phi(params.phi, ds.p))
    L = cholesky(R, jitter_for(n), "correlation matrix")
    F = basis_matrix(ds.X, basis)
    if params.beta.size != F.shape[1]:
        raise ValidationError(f"beta has {params.beta.size} entries, basis has {F.shape[1]}")
    e = ds.y - F @ params.beta
    u = solve_triangular(L, e, lower=True, check_finite=False)
    return -0.5 * (n * np.log(params.sigma2) + chol_logdet(L) + float(u @ u) / params.sigma2)


def ml_profile(ds: Dataset, phi, basis: BasisSpec = CONSTANT) -> tuple[np.ndarray, float, float]:
    """GLS beta, profile sigma^2 and the concentrated objective n log s2 + log|R|."""
    n = ds.n
    R = corr_matrix(ds.X, ds.X, phi)
    L = cholesky(R, jitter_for(n), "correlation matrix")
    F = basis_matrix(ds.X, basis)
    Fw = solve_triangular(L, F, lower=True, check_finite=False)
    yw = solve_triangular(L, ds.y, lower=True, check_finite=False)
    beta, *_ = np.linalg.lstsq(Fw, yw, rcond=None)
    r = yw - Fw @ beta
    sigma2 = max(float(r @ r) / n, SIGMA2_FLOOR)
    return beta, sigma2, n * np.log(sigma2) + chol_logdet(L)


def minimize_log_phi(objective: Callable[[np.ndarray], float], p: int, opts: FitOptions):
    """Best of ``opts.n_starts`` bounded Nelder-Mead runs over log(phi).

    Returns ``(log_phi, value, converged, n_evals)``.
    """
    rng = make_rng(opts.seed)
    starts = rng.uniform(opts.start_low, opts.start_high, size=(opts.n_starts, p))
    lo, hi = opts.log_phi_bounds
    n_evals = 0

    def f(t):
        nonlocal n_evals
        n_evals += 1
        try:
            val = float(objective(np.exp(t)))
        except NumericalError:
            val = np.inf
        if not np.isfinite(val):
            val = np.inf
        if opts.trace is not None:
            opts.trace.append((n_evals, np.exp(t).copy(), val))
        return val

    best = None
    for x0 in starts:
        simplex = np.vstack([x0, x0 + opts.initial_step * np.eye(p)])
        simplex = np.clip(simplex, lo, hi)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(
                f,
                x0,
                method="Nelder-Mead",
                bounds=[(lo, hi)] * p,
                options={
                    "initial_simplex": simplex,
                    "xatol": opts.xatol,
                    "fatol": np.inf,
                    "maxiter": opts.max_iter_per_dim * p,
                    "maxfev": opts.max_iter_per_dim * p * 2,
                },
            )
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun):
        raise NumericalError("objective was non-finite at every optimizer iterate")
    if not best.success:
        log.warning("log(phi) optimizer did not converge: %s", best.message)
    return best.x, float(best.fun), bool(best.success), n_evals


def fit_mle(ds: Dataset, basis: BasisSpec = CONSTANT, opts: Optional[FitOptions] = None) -> FittedModel:
    """Maximum likelihood via the concentrated objective over log(phi)."""
    opts = opts or FitOptions()
    if ds.n > opts.dense_cap:
        raise ValidationError(f"n={ds.n} exceeds the dense cap {opts.dense_cap}; full MLE is infeasible")
    t0 = time.perf_counter()
    t, val, ok, nev = minimize_log_phi(lambda phi: ml_profile(ds, phi, basis)[2], ds.p, opts)
    phi = np.exp(t)
    beta, sigma2, obj = ml_profile(ds, phi, basis)
    return FittedModel(
        GpParams(beta, sigma2, phi), "ML", basis, None, obj, time.perf_counter() - t0, ok, nev
    )


class DenseFactor:
    """Cholesky of the full jittered correlation matrix, reused across predictions."""

    def __init__(self, ds: Dataset, params: GpParams, basis: BasisSpec = CONSTANT):
        self.ds = ds
        self.params = params
        self.basis = basis
        R = corr_matrix(ds.X, ds.X, check_phi(params.phi, ds.p))
        self.L = cholesky(R, jitter_for(ds.n), "correlation matrix")
        F = basis_matrix(ds.X, basis)
        self.alpha = chol_solve(self.L, ds.y - F @ params.beta)

    def predict(self, Xstar) -> tuple[np.ndarray, np.ndarray]:
        """BLUP means and clamped-at-zero variances (plus raw variances)."""
        Xstar = as_points(Xstar)
        k = corr_matrix(Xstar, self.ds.X, self.params.phi)
        mean = basis_matrix(Xstar, self.basis) @ self.params.beta + k @ self.alpha
        v = solve_triangular(self.L, k.T, lower=True, check_finite=False)
        raw = self.params.sigma2 * (1.0 - np.sum(v * v, axis=0))
        return mean, raw


def blup(model, ds: Dataset, xstar, basis: Optional[BasisSpec] = None) -> PredictionResult:
    params, basis = unpack(model, basis)
    mean, raw = DenseFactor(ds, params, basis).predict(np.atleast_2d(np.asarray(xstar, dtype=float)))
    return PredictionResult(float(mean[0]), max(float(raw[0]), 0.0), float(raw[0]))


def blup_batch(model, ds: Dataset, Xstar, basis: Optional[BasisSpec] = None, chunk: int = 2000):
    params, basis = unpack(model, basis)
    fac = DenseFactor(ds, params, basis)
    Xstar = as_points(Xstar)
    means, raws = [], []
    for s in range(0, Xstar.shape[0], chunk):
        m, r = fac.predict(Xstar[s:s + chunk])
        means.append(m)
        raws.append(r)
    raw = np.concatenate(raws)
    return np.concatenate(means), np.maximum(raw, 0.0)


def sample_gp(X, params: GpParams, basis: BasisSpec = CONSTANT, seed=0) -> np.ndarray:
    """Draw y = F beta + sigma L u with L L^T = R + jitter*I and u ~ N(0, I)."""
    X = as_points(X)
    n = X.shape[0]
    R = corr_matrix(X, X, check_phi(params.phi, X.shape[1]))
    L = cholesky(R, jitter_for(n), "sampling correlation matrix")
    u = make_rng(seed).standard_normal(n)
    return basis_matrix(X, basis) @ params.beta + np.sqrt(params.sigma2) * (L @ u)
