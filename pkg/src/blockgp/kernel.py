"""Squared-exponential correlation, trend bases and jittered Cholesky helpers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.spatial.distance import cdist

JITTER_SCALE = 1e-10


class ValidationError(ValueError):
    """Bad user input: shapes, parameter ranges, missing fields."""


class NumericalError(RuntimeError):
    """A factorization or solve failed even after regularization."""


def jitter_for(dim: int) -> float:
    return JITTER_SCALE * dim


def check_phi(phi, p: int | None = None) -> np.ndarray:
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if phi.ndim != 1:
        raise ValidationError("phi must be a vector")
    if p is not None and phi.size != p:
        raise ValidationError(f"phi has {phi.size} entries, inputs have dimension {p}")
    if not np.all(np.isfinite(phi)) or np.any(phi <= 0):
        raise ValidationError(f"phi entries must be positive and finite, got {phi}")
    return phi


def as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValidationError("points must be an (n, p) array")
    return X


def sq_exp_corr(x, x2, phi) -> float:
    """exp(-(x - x2)^T diag(phi) (x - x2)) for a single pair of points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValidationError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    phi = check_phi(phi, x.size)
    d = x - x2
    return float(np.exp(-np.sum(phi * d * d)))


def corr_matrix(X, X2, phi) -> np.ndarray:
    """Correlation matrix between the rows of ``X`` and ``X2``.

    Distances are taken on sqrt(phi)-scaled inputs with a per-pair sum in a
    fixed order, so ``corr_matrix(X, X, phi)`` is exactly symmetric with an
    exact unit diagonal.
    """
    X = as_points(X)
    X2 = as_points(X2)
    if X.shape[1] != X2.shape[1]:
        raise ValidationError(f"dimension mismatch: {X.shape[1]} vs {X2.shape[1]}")
    s = np.sqrt(check_phi(phi, X.shape[1]))
    if X.shape[0] == 0 or X2.shape[0] == 0:
        return np.zeros((X.shape[0], X2.shape[0]))
    return np.exp(-cdist(X * s, X2 * s, "sqeuclidean"))


@dataclass(frozen=True)
class BasisSpec:
    """Regression functions f(x) of the trend f(x)^T beta.

    ``kind`` is ``"constant"``, ``"linear"`` or ``"custom"``; the custom kind
    takes a list of ``(name, callable)`` pairs, each mapping an (n, p) array
    to an n-vector.
    """

    kind: str = "constant"
    functions: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "custom"):
            raise ValidationError(f"unknown basis kind {self.kind!r}")
        if self.kind == "custom" and not self.functions:
            raise ValidationError("custom basis needs at least one function")

    def q(self, p: int) -> int:
        if self.kind == "constant":
            return 1
        if self.kind == "linear":
            return p + 1
        return len(self.functions)

    @property
    def names(self) -> list[str]:
        if self.kind == "custom":
            return [name for name, _ in self.functions]
        return [self.kind]

    @classmethod
    def custom(cls, functions: Sequence[tuple[str, Callable]]) -> "BasisSpec":
        return cls("custom", tuple(functions))


CONSTANT = BasisSpec()


def basis_matrix(X, spec: BasisSpec = CONSTANT) -> np.ndarray:
    X = as_points(X)
    n = X.shape[0]
    if spec.kind == "constant":
        return np.ones((n, 1))
    if spec.kind == "linear":
        return np.hstack([np.ones((n, 1)), X])
    cols = [np.broadcast_to(np.asarray(fn(X), dtype=float), (n,)) for _, fn in spec.functions]
    return np.column_stack(cols)


def cholesky(A: np.ndarray, jitter: float = 0.0, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``A + jitter*I``; raises NumericalError on failure."""
    A = np.asarray(A, dtype=float)
    if jitter:
        A = A + jitter * np.eye(A.shape[0])
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        try:
            cond = np.linalg.cond(A)
        except np.linalg.LinAlgError:
            cond = np.inf
        raise NumericalError(
            f"Cholesky of {what} ({A.shape[0]}x{A.shape[0]}) failed with jitter {jitter:.3g}; "
            f"condition number ~{cond:.3g}"
        ) from None


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cho_solve((L, True), b, check_finite=False)


def chol_logdet(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))
