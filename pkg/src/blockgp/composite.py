"""Composite likelihoods built from Gaussian component terms.

Three estimators share one representation: a list of :class:`ComponentTerm`
whose profile over (beta, sigma^2) has a closed form, leaving a
concentrated objective in phi alone.

* ``CI``  - exact terms for block 1 and block 2 | block 1, then for each
  point of block r >= 3 the minimum-variance combination of its conditional
  densities given each earlier block.
* ``CML`` - independent block marginals.
* ``CCL`` - every ordered pair of blocks, block j given block i.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .conditional import (
    BlockCache,
    Projections,
    build_cache,
    forward_projections,
    optimal_weights_batch,
    prefix_projections,
)
from .design import Partition
from .gp import SIGMA2_FLOOR, Dataset, FitOptions, FittedModel, GpParams, minimize_log_phi
from .kernel import (
    CONSTANT,
    BasisSpec,
    NumericalError,
    ValidationError,
    chol_logdet,
    chol_solve,
    cholesky,
    corr_matrix,
)

METHODS = ("CI", "CML", "CCL")


class IdentifiabilityError(NumericalError):
    """The trend coefficients are not identifiable from the terms."""


@dataclass(frozen=True)
class ComponentTerm:
    """A stack of ``b`` Gaussian terms in whitened form.

    Item t contributes
    ``-1/2 (d log s2 + logdet_part[t] + |u[t] - g[t] @ beta|^2 / s2)``, where
    ``u = A upsilon`` and ``g = A Gamma`` for a factor A with A^T A equal to
    the term's precision (unit variance scale). Arrays: u (b, e),
    g (b, e, q), logdet_part (b,). ``d`` counts the data dimensions each item
    accounts for; ``e`` may be smaller (rank-one terms have e = 1).
    """

    u: np.ndarray
    g: np.ndarray
    d: int
    logdet_part: np.ndarray
    label: str = ""

    @property
    def b(self) -> int:
        return self.u.shape[0]

    @property
    def dims(self) -> int:
        return self.b * self.d

    def quad(self, beta) -> np.ndarray:
        r = self.u - self.g @ np.atleast_1d(beta)
        return np.einsum("be,be->b", r, r)

    def loglik(self, beta, sigma2: float) -> float:
        return -0.5 * (
            self.dims * np.log(sigma2) + float(self.logdet_part.sum()) + float(self.quad(beta).sum()) / sigma2
        )

    def split(self):
        for t in range(self.b):
            yield ComponentTerm(self.u[t:t + 1], self.g[t:t + 1], self.d, self.logdet_part[t:t + 1],
                                f"{self.label}[{t}]")


def _single(u, g, logdet, label) -> ComponentTerm:
    return ComponentTerm(u[None], g[None], u.size, np.array([logdet]), label)


def _white(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return solve_triangular(L, B, lower=True, check_finite=False)


def _data(b) -> np.ndarray:
    """[y | F] for one block, shape (n_i, 1 + q)."""
    return np.column_stack([b.y, b.F])


def _term_from(white: np.ndarray, logdet: float, label: str) -> ComponentTerm:
    return _single(white[:, 0], white[:, 1:], logdet, label)


def _marginal_term(cache: BlockCache, i: int) -> ComponentTerm:
    b = cache.blocks[i]
    return _term_from(_white(b.L, _data(b)), b.logdet, f"block {i + 1}")


def _conditional_term(cache: BlockCache, j: int, i: int) -> ComponentTerm:
    """Block j conditioned on block i under the regularized model."""
    bi, bj = cache.blocks[i], cache.blocks[j]
    Z = _white(bi.L, cache.cross(i, j))
    S = bj.K - Z.T @ Z
    what = f"conditional covariance of block {j + 1} given {i + 1}"
    try:
        L = cholesky(S, 0.0, what)
    except NumericalError:
        L = cholesky(S, cache.jitter, what)
    resid = _data(bj) - Z.T @ _white(bi.L, _data(bi))
    return _term_from(_white(L, resid), chol_logdet(L), f"block {j + 1}|{i + 1}")


def _ci_points_term(cache: BlockCache, r: int, pr: Projections) -> ComponentTerm:
    br = cache.blocks[r]
    self_var = 1.0 + cache.jitter
    lam = pr.lam.T  # (n_r, r)
    K = self_var + np.moveaxis(pr.Lam, 2, 0) - lam[:, :, None] - lam[:, None, :]
    try:
        W, c = optimal_weights_batch(K)
    except NumericalError as err:
        raise NumericalError(f"block {r + 1}: {err}") from None
    ups = br.y[:, None] - pr.mean_y.T
    gam = br.F[:, None, :] - np.moveaxis(pr.mean_F, 1, 0)
    root = np.sqrt(c)
    u = root * np.einsum("ts,ts->t", W, ups)
    g = root[:, None] * np.einsum("ts,tsq->tq", W, gam)
    return ComponentTerm(u[:, None], g[:, None, :], 1, -np.log(c), f"block {r + 1} points")


def ci_block_term(cache: BlockCache, r: int) -> ComponentTerm:
    """Rank-one terms for every point of block ``r`` (0-based, r >= 2)."""
    panel = cache.panel(r)
    Kt = [panel[cache.offsets[i]:cache.offsets[i + 1]] for i in range(r)]
    return _ci_points_term(cache, r, prefix_projections(cache, r, Kt))


def ci_components(cache: BlockCache) -> list[ComponentTerm]:
    terms = [_marginal_term(cache, 0)]
    if cache.k >= 2:
        terms.append(_conditional_term(cache, 1, 0))
    if cache.k >= 3:
        proj = forward_projections(cache)
        terms.extend(_ci_points_term(cache, r, proj[r]) for r in range(2, cache.k))
    return terms


def cml_components(cache: BlockCache) -> list[ComponentTerm]:
    return [_marginal_term(cache, i) for i in range(cache.k)]


def _ccl_stacked(cache: BlockCache) -> Optional[ComponentTerm]:
    """All ordered pair terms in one stack when every block has the same
    size; None if some conditional covariance needs the jittered fallback."""
    k, m = cache.k, cache.blocks[0].n
    X = np.vstack([b.X for b in cache.blocks])
    C = corr_matrix(X, X, cache.phi).reshape(k, m, k, m).transpose(0, 2, 1, 3)
    ii, jj = np.nonzero(~np.eye(k, dtype=bool))
    eye = np.eye(m)
    Linv = np.stack([solve_triangular(b.L, eye, lower=True, check_finite=False) for b in cache.blocks])
    D = np.stack([_data(b) for b in cache.blocks])
    Dw = Linv @ D
    Z = Linv[ii] @ C[ii, jj]
    Zt = np.swapaxes(Z, 1, 2)
    S = np.stack([b.K for b in cache.blocks])[jj] - Zt @ Z
    try:
        Ls = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None
    white = np.linalg.solve(Ls, D[jj] - Zt @ Dw[ii])
    logdet = 2.0 * np.log(np.einsum("bii->bi", Ls)).sum(axis=1)
    return ComponentTerm(white[:, :, 0], white[:, :, 1:], m, logdet, "ordered pairs")


def ccl_components(cache: BlockCache, stacked: bool = True) -> list[ComponentTerm]:
    if cache.k == 1:
        return [_marginal_term(cache, 0)]
    if stacked and len(set(b.n for b in cache.blocks)) == 1:
        term = _ccl_stacked(cache)
        if term is not None:
            return [term]
    return [_conditional_term(cache, j, i) for i in range(cache.k) for j in range(cache.k) if j != i]


COMPONENTS = {"CI": ci_components, "CML": cml_components, "CCL": ccl_components}


@dataclass(frozen=True)
class ChiAccumulators:
    chi_GG: np.ndarray
    chi_GU: np.ndarray
    chi_UU: float
    n: int


def accumulate(terms) -> ChiAccumulators:
    """1/n-scaled sums of G^T Q G, G^T Q U and U^T Q U in term order."""
    q = terms[0].g.shape[2]
    GG = np.zeros((q, q))
    GU = np.zeros(q)
    UU = 0.0
    n = 0
    for t in terms:
        GG += np.einsum("beq,ber->qr", t.g, t.g)
        GU += np.einsum("beq,be->q", t.g, t.u)
        UU += float(np.einsum("be,be->", t.u, t.u))
        n += t.dims
    GG = 0.5 * (GG + GG.T)
    return ChiAccumulators(GG / n, GU / n, UU / n, n)


def profile_estimates(terms) -> tuple[np.ndarray, float, ChiAccumulators]:
    """beta_hat solving chi_GG beta = chi_GU and the matching sigma2_hat."""
    chi = accumulate(terms)
    q = chi.chi_GU.size
    if chi.n < q + 1:
        raise ValidationError(f"need at least q+1 = {q + 1} dimensions, terms carry {chi.n}")
    try:
        L = np.linalg.cholesky(chi.chi_GG)
    except np.linalg.LinAlgError:
        raise IdentifiabilityError("chi_GG is singular: trend coefficients are not identifiable") from None
    beta = chol_solve(L, chi.chi_GU)
    s2 = chi.chi_UU + beta @ chi.chi_GG @ beta - 2.0 * beta @ chi.chi_GU
    return beta, max(float(s2), SIGMA2_FLOOR), chi


def concentrated_objective(terms, n_total: Optional[int] = None) -> float:
    """n log sigma2_hat + sum of logdet parts (lower is better)."""
    _, s2, chi = profile_estimates(terms)
    n = chi.n if n_total is None else n_total
    return n * np.log(s2) + float(sum(t.logdet_part.sum() for t in terms))


def composite_objective(ds: Dataset, partition: Partition, phi, method: str, basis: BasisSpec = CONSTANT) -> float:
    cache = build_cache(ds, partition, phi, basis)
    return concentrated_objective(COMPONENTS[method](cache))


def composite_loglik(ds: Dataset, partition: Partition, params: GpParams, method: str,
                     basis: BasisSpec = CONSTANT) -> float:
    """Composite log-likelihood at explicit parameters (no profiling)."""
    cache = build_cache(ds, partition, params.phi, basis)
    return float(sum(t.loglik(params.beta, params.sigma2) for t in COMPONENTS[method](cache)))


def fit_composite(ds: Dataset, partition: Partition, method: str = "CI", basis: BasisSpec = CONSTANT,
                  opts: Optional[FitOptions] = None) -> FittedModel:
    """Minimize the concentrated composite objective over log(phi)."""
    if method not in COMPONENTS:
        raise ValidationError(f"unknown composite method {method!r}; choose from {METHODS}")
    if partition.n != ds.n:
        raise ValidationError("partition does not match dataset")
    opts = opts or FitOptions()
    t0 = time.perf_counter()
    t, val, ok, nev = minimize_log_phi(lambda phi: composite_objective(ds, partition, phi, method, basis),
                                       ds.p, opts)
    phi = np.exp(t)
    cache = build_cache(ds, partition, phi, basis)
    terms = COMPONENTS[method](cache)
    beta, s2, _ = profile_estimates(terms)
    obj = concentrated_objective(terms)
    return FittedModel(GpParams(beta, s2, phi), method, basis, partition, obj,
                       time.perf_counter() - t0, ok, nev)
