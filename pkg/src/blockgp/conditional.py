"""Per-block conditional moments of y(x) given each block's observations.

Everything here lives at unit process variance; callers multiply by sigma^2.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .design import Partition
from .gp import Dataset
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


@dataclass(frozen=True)
class Block:
    index: np.ndarray
    X: np.ndarray
    y: np.ndarray
    F: np.ndarray
    K: np.ndarray  # K(X_i, X_i) + jitter*I
    L: np.ndarray  # its lower Cholesky factor
    Kinv_y: np.ndarray
    Kinv_F: np.ndarray
    logdet: float

    @property
    def n(self) -> int:
        return self.X.shape[0]


class BlockCache:
    """Factorizations of every diagonal block for one fixed phi.

    The jitter is ``1e-10 * n`` with ``n`` the full dataset size, applied to
    every block, so all composite terms describe the same regularized model
    as the dense baseline. Cross-block correlation panels are built lazily
    on first use and then reused.
    """

    def __init__(self, blocks: Sequence[Block], phi: np.ndarray, basis: BasisSpec, jitter: float):
        self.blocks = tuple(blocks)
        self.phi = phi
        self.basis = basis
        self.jitter = jitter
        self._panels: Optional[list] = None
        sizes = [b.n for b in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def q(self) -> int:
        return self.blocks[0].F.shape[1]

    def panel(self, j: int) -> np.ndarray:
        """K(X_1..X_{j-1} stacked, X_j), shape (offsets[j], n_j)."""
        if self._panels is None:
            self._panels = [None] * self.k
        if self._panels[j] is None:
            if j == 0:
                pan = np.zeros((0, self.blocks[0].n))
            else:
                prev = np.vstack([b.X for b in self.blocks[:j]])
                pan = corr_matrix(prev, self.blocks[j].X, self.phi)
            self._panels[j] = pan
        return self._panels[j]

    def cross(self, i: int, j: int) -> np.ndarray:
        """K(X_i, X_j) for i != j."""
        if i < j:
            return self.panel(j)[self.offsets[i]:self.offsets[i + 1]]
        return self.panel(i)[self.offsets[j]:self.offsets[j + 1]].T


def build_cache(ds: Dataset, partition: Partition, phi, basis: BasisSpec = CONSTANT) -> BlockCache:
    phi = check_phi(phi, ds.p)
    if partition.n != ds.n:
        raise ValidationError(f"partition covers {partition.n} rows, dataset has {ds.n}")
    jitter = jitter_for(ds.n)
    F = basis_matrix(ds.X, basis)
    blocks = []
    for i, idx in enumerate(partition.blocks):
        Xi = ds.X[idx]
        Ki = corr_matrix(Xi, Xi, phi)
        Ki[np.diag_indices_from(Ki)] += jitter
        try:
            L = cholesky(Ki, 0.0, f"block {i + 1}")
        except NumericalError as err:
            raise NumericalError(f"block {i + 1}: {err}") from None
        yi, Fi = ds.y[idx], F[idx]
        blocks.append(Block(idx, Xi, yi, Fi, Ki, L, chol_solve(L, yi), chol_solve(L, Fi), chol_logdet(L)))
    return BlockCache(blocks, phi, basis, jitter)


def _solve_block(cache: BlockCache, i: int, x) -> tuple[np.ndarray, np.ndarray]:
    b = cache.blocks[i]
    a = corr_matrix(np.atleast_2d(x), b.X, cache.phi)[0]
    return a, chol_solve(b.L, a)


def cond_mean(cache: BlockCache, i: int, x, beta) -> float:
    """E[y(x) | y(X_i) = y_i]."""
    b = cache.blocks[i]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = corr_matrix(x, b.X, cache.phi)[0]
    beta = np.atleast_1d(beta)
    fx = basis_matrix(x, cache.basis)[0]
    return float(fx @ beta + a @ (b.Kinv_y - b.Kinv_F @ beta))


def cond_cross_cov(cache: BlockCache, i: int, j: int, x, self_var: float = 1.0) -> float:
    """Cov(eps_i, eps_j) / sigma^2 where eps_i = y(x) | y(X_i).

    ``self_var`` is the unit-scale variance of y(x) itself: 1 for a new
    location, 1 + jitter for a point of the (regularized) dataset.
    """
    a_i, v_i = _solve_block(cache, i, x)
    lam_i = float(a_i @ v_i)
    if i == j:
        return self_var - lam_i
    a_j, v_j = _solve_block(cache, j, x)
    lam_j = float(a_j @ v_j)
    return self_var + float(v_i @ cache.cross(i, j) @ v_j) - lam_i - lam_j


@dataclass(frozen=True)
class CondMoments:
    """Moments of (eps_i)_{i in S} at one location, unit variance scale.

    Mean of eps_i is ``f(x)^T beta + mean_y[i] - mean_F[i] @ beta``.
    """

    blocks: tuple
    mean_y: np.ndarray
    mean_F: np.ndarray
    fx: np.ndarray
    lam: np.ndarray
    K: np.ndarray

    def means(self, beta) -> np.ndarray:
        beta = np.atleast_1d(beta)
        return self.fx @ beta + self.mean_y - self.mean_F @ beta


def cond_cov_matrix(cache: BlockCache, S: Sequence[int], x, self_var: float = 1.0) -> CondMoments:
    S = tuple(int(i) for i in S)
    if not S:
        raise ValidationError("block subset must be non-empty")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    solved = [_solve_block(cache, i, x) for i in S]
    lam = np.array([a @ v for a, v in solved])
    m = len(S)
    K = np.empty((m, m))
    for u in range(m):
        K[u, u] = self_var - lam[u]
        for w in range(u + 1, m):
            val = self_var + solved[u][1] @ cache.cross(S[u], S[w]) @ solved[w][1] - lam[u] - lam[w]
            K[u, w] = K[w, u] = val
    mean_y = np.array([v @ cache.blocks[i].y for i, (_, v) in zip(S, solved)])
    mean_F = np.array([v @ cache.blocks[i].F for i, (_, v) in zip(S, solved)])
    fx = basis_matrix(x, cache.basis)[0]
    return CondMoments(S, mean_y, mean_F, fx, lam, K)


@dataclass
class Projections:
    """Batched conditional quantities of T targets against blocks 0..r-1.

    ``lam`` is (r, T); ``Lam`` is (r, r, T) with Lam[i, i] = lam[i];
    ``mean_y`` is (r, T); ``mean_F`` is (r, T, q).
    """

    lam: np.ndarray
    Lam: np.ndarray
    mean_y: np.ndarray
    mean_F: np.ndarray


def prefix_projections(cache: BlockCache, r: int, Kt: Sequence[np.ndarray]) -> Projections:
    """Conditional pieces for targets given their correlations ``Kt[i]`` =
    K(X_i, targets) with the first ``r`` blocks.

    Each unordered block pair is evaluated once and mirrored, so ``Lam`` is
    exactly symmetric.
    """
    T = Kt[0].shape[1]
    q = cache.q
    V = [chol_solve(cache.blocks[i].L, Kt[i]) for i in range(r)]
    lam = np.array([np.einsum("ij,ij->j", Kt[i], V[i]) for i in range(r)]).reshape(r, T)
    mean_y = np.array([cache.blocks[i].y @ V[i] for i in range(r)]).reshape(r, T)
    mean_F = np.array([V[i].T @ cache.blocks[i].F for i in range(r)]).reshape(r, T, q)
    Lam = np.empty((r, r, T))
    Lam[np.arange(r), np.arange(r)] = lam
    if r > 1:
        Vall = np.vstack(V)
        starts = cache.offsets[:r]
        for j in range(1, r):
            H = cache.panel(j) @ V[j]
            upper = np.add.reduceat(Vall[: cache.offsets[j]] * H, starts[:j], axis=0)
            Lam[:j, j] = upper
            Lam[j, :j] = upper
    return Projections(lam, Lam, mean_y, mean_F)


def forward_projections(cache: BlockCache) -> list[Optional[Projections]]:
    """:func:`prefix_projections` for every block's own points against all
    earlier blocks, in one sweep.

    Entry r (r >= 1) holds the pieces for the points of block r given
    blocks 0..r-1; entry 0 is None. Each block is solved once against all
    later points and each cross panel multiplies all later targets at once,
    which keeps the matrix products large.
    """
    k, q, off = cache.k, cache.q, cache.offsets
    n = int(off[-1])
    if k < 2:
        return [None] * k
    # V[i] = K_i^-1 K(X_i, X_{>i}); columns are the points after block i
    A = [np.hstack([cache.panel(r)[off[i]:off[i + 1]] for r in range(i + 1, k)]) for i in range(k - 1)]
    V = [chol_solve(cache.blocks[i].L, np.eye(cache.blocks[i].n)) @ A[i] for i in range(k - 1)]
    out: list[Optional[Projections]] = [None]
    for r in range(1, k):
        T = cache.blocks[r].n
        out.append(Projections(np.empty((r, T)), np.empty((r, r, T)), np.empty((r, T)), np.empty((r, T, q))))

    def cols(i: int, r: int) -> slice:
        base = off[i + 1]
        return slice(off[r] - base, off[r + 1] - base)

    for i in range(k - 1):
        b = cache.blocks[i]
        lam_i = np.einsum("ij,ij->j", A[i], V[i])
        my = b.y @ V[i]
        mF = V[i].T @ b.F
        for r in range(i + 1, k):
            c = cols(i, r)
            pr = out[r]
            pr.lam[i] = lam_i[c]
            pr.Lam[i, i] = lam_i[c]
            pr.mean_y[i] = my[c]
            pr.mean_F[i] = mF[c]
    for j in range(1, k - 1):
        H = cache.panel(j) @ V[j]  # (off_j, points after j)
        upper = np.empty((j, H.shape[1]))
        for i in range(j):
            Vi = V[i][:, off[j + 1] - off[i + 1]:]
            upper[i] = np.einsum("at,at->t", Vi, H[off[i]:off[i + 1]])
        for r in range(j + 1, k):
            c = slice(off[r] - off[j + 1], off[r + 1] - off[j + 1])
            out[r].Lam[:j, j] = upper[:, c]
            out[r].Lam[j, :j] = upper[:, c]
    return out


def optimal_weights(K, jitter: Optional[float] = None) -> tuple[np.ndarray, float]:
    """Minimum-variance weights summing to one for covariance ``K``.

    Returns ``(w, varmin)`` with w = K^-1 1 / (1^T K^-1 1) and
    varmin = 1 / (1^T K^-1 1), after adding ``1e-10 * dim`` to the diagonal.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValidationError("K must be square")
    m = K.shape[0]
    jitter = jitter_for(m) if jitter is None else jitter
    L = cholesky(K, jitter, "conditional covariance")
    u = chol_solve(L, np.ones(m))
    c = float(u.sum())
    if not (np.isfinite(c) and c > 0):
        raise NumericalError(f"1^T K^-1 1 = {c} is not positive")
    w = u / c
    return w / w.sum(), 1.0 / c


def optimal_weights_batch(K: np.ndarray, jitter: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`optimal_weights` over a stack (b, m, m).

    Returns ``(W, c)`` with W (b, m) and c = 1^T K^-1 1 (b,). Items whose
    solve is singular or gives c <= 0 (near-deterministic targets) are
    retried with the diagonal jitter raised tenfold, up to 12 times.
    """
    b, m, _ = K.shape
    jitter = jitter_for(m) if jitter is None else jitter
    eye = np.eye(m)
    ones = np.ones(m)
    try:
        u = np.linalg.solve(K + jitter * eye, np.ones((b, m, 1)))[..., 0]
    except np.linalg.LinAlgError:
        u = np.full((b, m), np.nan)
    c = u.sum(axis=1)
    bad = np.flatnonzero(~(np.isfinite(c) & (c > 0)))
    for t in bad:
        jit = jitter
        for _ in range(12):
            jit *= 10.0
            try:
                ut = np.linalg.solve(K[t] + jit * eye, ones)
            except np.linalg.LinAlgError:
                continue
            if np.isfinite(ut.sum()) and ut.sum() > 0:
                u[t], c[t] = ut, ut.sum()
                break
        else:
            raise NumericalError(f"1^T K^-1 1 not positive for batch item {t} even with jitter")
    if bad.size:
        log.debug("raised weight jitter for %d of %d items", bad.size, b)
    W = u / c[:, None]
    W /= W.sum(axis=1, keepdims=True)
    return W, c


def projection_oracle(x, Xi, Xj, phi, yi=None, yj=None, jitter: float = 0.0, self_var: float = 1.0):
    """Conditional means and covariance of (eps_i, eps_j) via an explicit
    factor A of the joint covariance of (y(x), y(X_i), y(X_j)).

    A is built from the symmetric eigendecomposition C = U diag(s) U^T as
    A = diag(sqrt(s)) U^T, so that A^T A = C. The conditional variable
    eps_i is a^T (I - P_i) eps + a^T A_i (A_i^T A_i)^-1 z_i with P_i the
    projection onto span(A_i); the covariance is a^T (I - P_i)(I - P_j) a.
    Zero-mean process; returns ``(mean_i, mean_j, cov_ij, var_i, var_j)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Xi, Xj = as_points(Xi), as_points(Xj)
    # a repeated block would make the joint matrix singular up to jitter
    same = Xi.shape == Xj.shape and np.array_equal(Xi, Xj)
    pts = np.vstack([x, Xi] if same else [x, Xi, Xj])
    C = corr_matrix(pts, pts, phi)
    ni, nj = Xi.shape[0], Xj.shape[0]
    diag = np.concatenate([[self_var - 1.0], np.full(pts.shape[0] - 1, jitter)])
    C = C + np.diag(diag)
    s, U = np.linalg.eigh(C)
    A = np.sqrt(np.clip(s, 0.0, None))[:, None] * U.T
    a = A[:, 0]
    Ai = A[:, 1:1 + ni]
    Aj = Ai if same else A[:, 1 + ni:]

    def proj(B):
        return B @ np.linalg.solve(B.T @ B, B.T)

    m = A.shape[0]
    Pi, Pj = proj(Ai), proj(Aj)
    Ii, Ij = np.eye(m) - Pi, np.eye(m) - Pj
    cov = float(a @ Ii @ Ij @ a)
    var_i = float(a @ Ii @ Ii @ a)
    var_j = float(a @ Ij @ Ij @ a)
    yi = np.zeros(ni) if yi is None else np.asarray(yi, dtype=float)
    yj = np.zeros(nj) if yj is None else np.asarray(yj, dtype=float)
    mean_i = float(a @ Ai @ np.linalg.solve(Ai.T @ Ai, yi))
    mean_j = float(a @ Aj @ np.linalg.solve(Aj.T @ Aj, yj))
    return mean_i, mean_j, cov, var_i, var_j
