"""Kernel evaluation, Cholesky plumbing, space-filling designs and scalar
probability utilities shared by every other module.

The kernel is the anisotropic product squared-exponential

    k(x, x') = prod_d exp(-(x_d - x'_d)^2 / gamma_d^2),

with an optional nugget ``eta`` added on the diagonal of correlation
matrices.  Note the absence of the conventional factor 2 in the
denominator; all closed forms downstream assume this parameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf
from scipy.spatial.distance import pdist
from scipy.special import ndtr

__all__ = [
    "KernelParams",
    "CholFactor",
    "FactorizationError",
    "kernel_eval",
    "kernel_cross",
    "kernel_grad",
    "kernel_hessian_diag",
    "correlation_matrix",
    "chol_factor",
    "chol_solve",
    "maximin_lhs",
    "random_lhs",
    "std_normal_cdf",
]


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization failed; ``pivot`` is the 1-based index of the
    first non-positive-definite leading minor (usually a sign that the
    nugget is too small for near-duplicate points)."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(
            f"matrix is not positive definite (failure at pivot {pivot}); "
            "consider increasing the nugget"
        )


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the product squared-exponential kernel.

    Args:
        lengthscales: per-dimension correlation lengths, all positive.
        signal_variance: process variance multiplying the correlation.
        nugget: nonnegative jitter added to the correlation diagonal.
    """

    lengthscales: np.ndarray
    signal_variance: float
    nugget: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if ls.ndim != 1 or ls.size == 0:
            raise ValueError("lengthscales must be a nonempty 1-d array")
        if not np.all(ls > 0):
            raise ValueError("all lengthscales must be positive")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if self.nugget < 0:
            raise ValueError("nugget must be nonnegative")

    @property
    def dim(self) -> int:
        return self.lengthscales.size


def _check_dim(params: KernelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.dim:
        raise ValueError(
            f"point dimension {x.shape[-1]} does not match kernel dimension {params.dim}"
        )
    return x


def kernel_eval(params: KernelParams, x, x2, same_point: bool = False) -> float:
    """Evaluate k(x, x2), adding the nugget when ``same_point`` is set."""
    x = _check_dim(params, x)
    x2 = _check_dim(params, x2)
    r = np.exp(-np.sum(((x - x2) / params.lengthscales) ** 2))
    if same_point:
        r += params.nugget
    return float(r)


def kernel_cross(params: KernelParams, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Kernel matrix between two point sets, shape (n1, n2), no nugget."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float)) / params.lengthscales
    X2 = np.atleast_2d(np.asarray(X2, dtype=float)) / params.lengthscales
    sq = (
        np.sum(X1**2, axis=1)[:, None]
        - 2.0 * X1 @ X2.T
        + np.sum(X2**2, axis=1)[None, :]
    )
    return np.exp(-np.maximum(sq, 0.0))


def kernel_grad(params: KernelParams, xstar, x) -> np.ndarray:
    """Gradient of k(x*, x) with respect to x*.

    Component d is ``-2 (x*_d - x_d) / gamma_d^2`` times the kernel value.
    """
    xstar = _check_dim(params, xstar)
    x = _check_dim(params, x)
    k = kernel_eval(params, xstar, x)
    return -2.0 * (xstar - x) / params.lengthscales**2 * k


def kernel_hessian_diag(params: KernelParams) -> np.ndarray:
    """Diagonal of the kernel Hessian at zero displacement: 2 / gamma_d^2."""
    return 2.0 / params.lengthscales**2


def correlation_matrix(params: KernelParams, X: np.ndarray) -> np.ndarray:
    """Correlation matrix R(X) with unit-plus-nugget diagonal."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    R = kernel_cross(params, X, X)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0 + params.nugget)
    return R


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor with a cached log-determinant of the original
    matrix."""

    lower: np.ndarray
    log_det: float = field(default=float("nan"))

    def __post_init__(self):
        if math.isnan(self.log_det):
            object.__setattr__(
                self, "log_det", 2.0 * float(np.sum(np.log(np.diag(self.lower))))
            )

    @property
    def n(self) -> int:
        return self.lower.shape[0]


_JITTER = 1e-8


def chol_factor(A: np.ndarray, jitter_retry: bool = True) -> CholFactor:
    """Cholesky-factorize a symmetric positive-definite matrix.

    Retries once with a small diagonal jitter (1e-8) before raising
    :class:`FactorizationError`; near-duplicate design points produced by
    sequential design make the retry worth having.
    """
    A = np.asarray(A, dtype=float)
    c, info = dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        if not jitter_retry:
            raise FactorizationError(int(info))
        c, info = dpotrf(A + _JITTER * np.eye(A.shape[0]), lower=1, clean=1)
        if info > 0:
            raise FactorizationError(int(info))
    elif info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    return CholFactor(lower=c)


def chol_solve(factor: CholFactor, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the Cholesky factor of A."""
    return cho_solve((factor.lower, True), np.asarray(b, dtype=float))


def chol_inverse(factor: CholFactor) -> np.ndarray:
    """Dense A^{-1} from the factor (used where repeated traces are needed)."""
    Linv = solve_triangular(factor.lower, np.eye(factor.n), lower=True)
    return Linv.T @ Linv


def random_lhs(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Plain Latin hypercube sample on [0, 1]^d: one point per stratum."""
    u = rng.uniform(size=(n, d))
    out = np.empty((n, d))
    for j in range(d):
        out[:, j] = (rng.permutation(n) + u[:, j]) / n
    return out


def maximin_lhs(
    n: int,
    d: int,
    bounds=None,
    seed: int = 0,
    n_draws: int = 50,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Best-of-``n_draws`` maximin Latin hypercube design.

    Draws ``n_draws`` random LHS candidates and keeps the one whose minimum
    pairwise distance (in the unit cube) is largest.  Deterministic given
    ``seed`` (or a caller-supplied ``rng``).

    Args:
        n: number of design points, at least 2.
        d: input dimension.
        bounds: optional (d, 2) array of (lo, hi) per dimension; the unit-cube
            design is affinely mapped onto it.
        seed: RNG seed, ignored when ``rng`` is given.
        n_draws: number of candidate hypercubes scored.

    Returns:
        (n, d) array of design points.
    """
    if n < 2:
        raise ValueError("maximin_lhs requires n >= 2")
    if rng is None:
        rng = np.random.default_rng(seed)
    best, best_score = None, -np.inf
    for _ in range(n_draws):
        cand = random_lhs(n, d, rng)
        score = np.min(pdist(cand))
        if score > best_score:
            best, best_score = cand, score
    if bounds is not None:
        bounds = np.asarray(bounds, dtype=float).reshape(d, 2)
        lo, hi = bounds[:, 0], bounds[:, 1]
        if np.any(lo >= hi):
            raise ValueError("degenerate bounds: every lo must be < hi")
        best = lo + best * (hi - lo)
    return best


def std_normal_cdf(z):
    """Standard normal CDF (erf-based, accurate to well below 1e-12)."""
    return ndtr(z)
