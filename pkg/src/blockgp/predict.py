"""Block predictors: the minimum-variance block predictor and the
composite-likelihood predictor, both driven by the Lambda/lambda system.

For a target x* and blocks i, j:

    Lambda[i, j] = K(x*, X_i) K_i^-1 K(X_i, X_j) K_j^-1 K(X_j, x*)
    lambda[i]    = K(x*, X_i) K_i^-1 K(X_i, x*)

and a weight vector w with sum(w) = 1 has unit-scale prediction variance
``w^T Lambda w - 2 lambda^T w + 1``. The conditional covariance of the
per-block predictors is never inverted.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .conditional import BlockCache, optimal_weights, prefix_projections
from .gp import PredictionResult, unpack
from .kernel import NumericalError, ValidationError, as_points, basis_matrix, corr_matrix, jitter_for

log = logging.getLogger(__name__)

HIT_RTOL = 1e-12
CL_LAMBDA_LIMIT = 1.0 - 1e-12
LAMBDA_NEGLIGIBLE = 1e-200
LAMBDA_RTOL = 1e-16


@dataclass(frozen=True)
class LambdaSystem:
    Lambda: np.ndarray  # (k, k)
    lam: np.ndarray  # (k,)


@dataclass
class BatchPrediction:
    mean: np.ndarray
    variance: np.ndarray
    variance_raw: np.ndarray
    weights: np.ndarray  # (T, k)
    block_means: np.ndarray  # (T, k)
    flagged: np.ndarray  # (T,) bool

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def item(self, t: int) -> PredictionResult:
        return PredictionResult(
            float(self.mean[t]), float(self.variance[t]), float(self.variance_raw[t]),
            self.weights[t].copy(), self.block_means[t].copy(), bool(self.flagged[t]),
        )


def _target_corrs(cache: BlockCache, Xt: np.ndarray) -> list[np.ndarray]:
    return [corr_matrix(b.X, Xt, cache.phi) for b in cache.blocks]


def lambda_system(cache: BlockCache, xstar) -> LambdaSystem:
    x = np.atleast_2d(np.asarray(xstar, dtype=float))
    pr = prefix_projections(cache, cache.k, _target_corrs(cache, x))
    return LambdaSystem(pr.Lam[:, :, 0], pr.lam[:, 0])


def _equilibrated_solve(Lam: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a stack Lam (T, k, k) against rhs (T, k, c) after symmetric
    diagonal scaling; items that fail get escalating diagonal jitter."""
    d = np.sqrt(np.einsum("tii->ti", Lam))
    d = np.where(d > 0, d, 1.0)
    A = Lam / d[:, :, None] / d[:, None, :]
    B = rhs / d[:, :, None]
    k = Lam.shape[1]
    eye = np.eye(k)
    out = np.empty_like(B)
    try:
        out[:] = np.linalg.solve(A, B)
        good = np.all(np.isfinite(out), axis=(1, 2))
    except np.linalg.LinAlgError:
        good = np.zeros(A.shape[0], dtype=bool)
    for t in np.flatnonzero(~good):
        jit = jitter_for(k)
        for _ in range(12):
            try:
                sol = np.linalg.solve(A[t] + jit * eye, B[t])
            except np.linalg.LinAlgError:
                sol = None
            if sol is not None and np.all(np.isfinite(sol)):
                out[t] = sol
                break
            jit *= 10.0
        else:
            raise NumericalError("Lambda system could not be solved even with jitter")
    return out / d[:, :, None]


def _kkt_weights(Lam: np.ndarray, lam: np.ndarray) -> np.ndarray:
    T, k, _ = Lam.shape
    rhs = np.stack([np.ones((T, k)), lam], axis=2)
    sol = _equilibrated_solve(Lam, rhs)
    inv1, invl = sol[:, :, 0], sol[:, :, 1]
    c = (1.0 - invl.sum(axis=1)) / inv1.sum(axis=1)
    w = c[:, None] * inv1 + invl
    return w / w.sum(axis=1, keepdims=True)


def blubp_weights_batch(Lam: np.ndarray, lam: np.ndarray):
    """Vectorized optimal weights; returns (omega (T, k), varfactor, raw).

    A block with lambda_i = 0 has a zero row in Lambda, so its weight only
    enters through the sum-to-one constraint. Blocks with lambda below
    ``LAMBDA_RTOL`` times the largest are treated that way: the others take
    Lambda'^-1 lambda' and the negligible ones share the remainder.
    """
    T, k, _ = Lam.shape
    omega = np.full((T, k), 1.0 / k)
    lmax = lam.max(axis=1)
    negl = lam <= LAMBDA_RTOL * lmax[:, None]
    live_any = lmax > LAMBDA_NEGLIGIBLE
    regular = live_any & ~negl.any(axis=1)
    if np.any(regular):
        omega[regular] = _kkt_weights(Lam[regular], lam[regular])
    for t in np.flatnonzero(live_any & ~regular):
        on = ~negl[t]
        sub = Lam[t][np.ix_(on, on)]
        w = _equilibrated_solve(sub[None], lam[t, on][None, :, None])[0, :, 0]
        omega[t, on] = w
        omega[t, ~on] = (1.0 - w.sum()) / np.count_nonzero(~on)
    raw = np.einsum("ti,tij,tj->t", omega, Lam, omega) - 2.0 * np.einsum("tk,tk->t", lam, omega) + 1.0
    return omega, np.maximum(raw, 0.0), raw


def blubp_weights(sys: LambdaSystem) -> tuple[np.ndarray, float]:
    """(omega_hat, varfactor) for one Lambda system."""
    om, vf, _ = blubp_weights_batch(sys.Lambda[None], sys.lam[None])
    return om[0], float(vf[0])


def blubp_weights_direct(sys: LambdaSystem) -> tuple[np.ndarray, float]:
    """Weights from the explicit conditional covariance
    1 1^T + Lambda - lambda 1^T - 1 lambda^T. Cross-check only: this matrix
    is singular at design points and ill-conditioned near them."""
    k = sys.lam.size
    one = np.ones(k)
    Sigma = np.outer(one, one) + sys.Lambda - np.outer(sys.lam, one) - np.outer(one, sys.lam)
    return optimal_weights(Sigma)


def check_lambda_pd(sys: LambdaSystem) -> tuple[float, bool]:
    """Smallest eigenvalue of Lambda (no jitter) and whether Cholesky succeeds."""
    eig = float(np.linalg.eigvalsh(sys.Lambda)[0])
    try:
        np.linalg.cholesky(sys.Lambda)
        ok = True
    except np.linalg.LinAlgError:
        ok = False
    return eig, ok


def _check_cache(cache: BlockCache, params):
    if params.phi.shape != cache.phi.shape or not np.allclose(params.phi, cache.phi, rtol=1e-12, atol=0):
        raise ValidationError("cache was built for a different phi; rebuild it")


def _exact_hits(cache: BlockCache, Xt: np.ndarray):
    """(block, position) of design points that coincide with targets, or -1."""
    Xd = np.vstack([b.X for b in cache.blocks])
    tree = cKDTree(Xd)
    dist, idx = tree.query(Xt, k=1)
    scale = np.maximum(1.0, np.linalg.norm(Xd[idx], axis=1))
    hit = dist <= HIT_RTOL * scale
    blk = np.searchsorted(cache.offsets, idx, side="right") - 1
    pos = idx - cache.offsets[blk]
    return np.where(hit, blk, -1), pos


def predict_batch(model, cache: BlockCache, Xstar, predictor: str = "blubp", prior_weights=None,
                  chunk: int = 500, exact_hits: bool = True) -> BatchPrediction:
    """Predict at many targets with the BLUBP or the CL predictor."""
    params, basis = unpack(model, cache.basis)
    _check_cache(cache, params)
    if predictor not in ("blubp", "cl"):
        raise ValidationError(f"unknown block predictor {predictor!r}")
    Xstar = as_points(Xstar)
    k = cache.k
    if prior_weights is None:
        prior = np.full(k, 1.0 / k)
    else:
        prior = np.asarray(prior_weights, dtype=float)
        if prior.shape != (k,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-10:
            raise ValidationError("prior weights must be k non-negative numbers summing to 1")
    T = Xstar.shape[0]
    out = BatchPrediction(np.empty(T), np.empty(T), np.empty(T), np.empty((T, k)), np.empty((T, k)),
                          np.zeros(T, dtype=bool))
    beta, s2 = params.beta, params.sigma2
    for s in range(0, T, chunk):
        Xt = Xstar[s:s + chunk]
        sl = slice(s, s + Xt.shape[0])
        pr = prefix_projections(cache, k, _target_corrs(cache, Xt))
        trend = basis_matrix(Xt, basis) @ beta
        offs = (pr.mean_y - pr.mean_F @ beta).T  # (t, k)
        Lam = np.moveaxis(pr.Lam, 2, 0)
        lam = pr.lam.T
        if predictor == "blubp":
            w, vf, raw = blubp_weights_batch(Lam, lam)
            flag = np.zeros(Xt.shape[0], dtype=bool)
        else:
            w, vf, raw, flag = _cl_weights(Lam, lam, prior)
        out.mean[sl] = trend + np.einsum("tk,tk->t", w, offs)
        out.variance[sl] = s2 * vf
        out.variance_raw[sl] = s2 * raw
        out.weights[sl] = w
        out.block_means[sl] = trend[:, None] + offs
        out.flagged[sl] = flag
    if exact_hits:
        blk, pos = _exact_hits(cache, Xstar)
        for t in np.flatnonzero(blk >= 0):
            b = cache.blocks[blk[t]]
            out.mean[t] = b.y[pos[t]]
            out.variance[t] = out.variance_raw[t] = 0.0
            if predictor == "blubp":
                out.weights[t] = np.eye(k)[blk[t]]
    neg = out.variance_raw < 0
    if np.any(neg):
        log.debug("clamped %d negative variances (min %.3g)", int(neg.sum()), float(out.variance_raw.min()))
    return out


def _cl_weights(Lam, lam, prior):
    """Composite-likelihood weights W_i ~ prior_i / (1 - lambda_i)."""
    T, k = lam.shape
    inside = lam >= CL_LAMBDA_LIMIT
    flag = inside.any(axis=1)
    denom = np.where(inside, 1.0, 1.0 - lam)
    W = prior[None, :] / denom
    W /= W.sum(axis=1, keepdims=True)
    for t in np.flatnonzero(flag):
        W[t] = np.eye(k)[int(np.argmax(lam[t]))]
    raw = np.einsum("ti,tij,tj->t", W, Lam, W) - 2.0 * np.einsum("tk,tk->t", lam, W) + 1.0
    return W, np.maximum(raw, 0.0), raw, flag


def predict_blubp(model, cache: BlockCache, xstar, exact_hits: bool = True) -> PredictionResult:
    """Best linear unbiased block predictor at one location."""
    return predict_batch(model, cache, np.atleast_2d(xstar), "blubp", exact_hits=exact_hits).item(0)


def predict_cl(model, cache: BlockCache, xstar, prior_weights=None, exact_hits: bool = True) -> PredictionResult:
    """Composite-likelihood predictor (equal prior weights by default)."""
    return predict_batch(model, cache, np.atleast_2d(xstar), "cl", prior_weights, exact_hits=exact_hits).item(0)
