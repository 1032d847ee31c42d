"""Single-layer Gaussian-process emulator.

Fits hyperparameters by maximum likelihood, predicts with the zero-mean
posterior

    mu(x*) = r(x*)' R(X)^{-1} y,
    s2(x*) = sigma^2 (1 + eta - r(x*)' R(X)^{-1} r(x*)),

and exposes the closed-form gradient posterior

    mu_grad(x*)  = Dr(x*)' R(X)^{-1} y,
    Sig_grad(x*) = sigma^2 (H - Dr(x*)' R(X)^{-1} Dr(x*)),

where Dr is the (n, d) matrix of kernel derivatives and H the constant
kernel Hessian at zero displacement.

Outputs are standardized and inputs mapped to the unit cube internally;
every public quantity (means, variances, gradients) is reported in the
caller's original units.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .mathcore import (
    CholFactor,
    FactorizationError,
    KernelParams,
    chol_factor,
    correlation_matrix,
    kernel_cross,
    kernel_hessian_diag,
    random_lhs,
)

__all__ = [
    "GpModel",
    "GaussianPrediction",
    "GradientPosterior",
    "GpFitError",
    "gp_fit",
    "gp_condition",
    "gp_predict",
    "gp_predict_batch",
    "gp_gradient",
    "gp_gradient_batch",
    "gp_mean_var_derivs_batch",
    "variance_clamp_count",
    "reset_variance_clamp_count",
]


class GpFitError(RuntimeError):
    """Raised when hyperparameter estimation cannot proceed."""


class _ClampCounter:
    """Counts negative predicted variances clamped to zero (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, k: int):
        if k:
            with self._lock:
                self._count += int(k)

    @property
    def count(self) -> int:
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0


_clamps = _ClampCounter()


def variance_clamp_count() -> int:
    return _clamps.count


def reset_variance_clamp_count():
    _clamps.reset()


def _clamp_nonneg(a: np.ndarray) -> np.ndarray:
    neg = a < 0
    if np.any(neg):
        _clamps.add(int(np.count_nonzero(neg)))
        a = np.where(neg, 0.0, a)
    return a


@dataclass(frozen=True)
class GaussianPrediction:
    mean: float
    variance: float


@dataclass(frozen=True)
class GradientPosterior:
    """Gaussian posterior over the emulator gradient at one point."""

    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d), symmetric PSD

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class GpModel:
    """Immutable trained GP.

    ``params`` live in the internal coordinates: inputs affinely mapped by
    ``(x - x_shift) / x_scale`` and outputs by ``(y - y_shift) / y_scale``.
    ``alpha`` solves R(X_s) alpha = y_s.  Use :attr:`effective_lengthscales`
    for the equivalent lengthscales in original input units.
    """

    x_train: np.ndarray  # (n, d) original units
    y_train: np.ndarray  # (n,) original units
    params: KernelParams
    x_shift: np.ndarray  # (d,)
    x_scale: np.ndarray  # (d,)
    y_shift: float
    y_scale: float
    chol: CholFactor
    alpha: np.ndarray  # (n,)
    xs: np.ndarray = field(repr=False, default=None)  # scaled training inputs

    def __post_init__(self):
        if self.xs is None:
            object.__setattr__(self, "xs", self.scale_x(self.x_train))

    @property
    def n(self) -> int:
        return self.x_train.shape[0]

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def effective_lengthscales(self) -> np.ndarray:
        return self.params.lengthscales * self.x_scale

    def scale_x(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.x_shift) / self.x_scale


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def _unpack(z, d, fixed_nugget):
    gammas = np.exp(z[:d])
    sig2 = float(np.exp(z[d]))
    eta = float(np.exp(z[d + 1])) if fixed_nugget is None else float(fixed_nugget)
    return gammas, sig2, eta


def _nll_and_grad(z, dsq, ys, fixed_nugget):
    """Negative log marginal likelihood and its gradient in log-parameters.

    Args:
        z: log-parameters [log gamma_1..d, log sigma2, (log eta)].
        dsq: (d, n, n) per-dimension squared coordinate differences.
        ys: (n,) outputs in internal units.
        fixed_nugget: fixed nugget value, or None when jointly optimized.
    """
    d, n = dsq.shape[0], dsq.shape[1]
    gammas, sig2, eta = _unpack(z, d, fixed_nugget)
    K0 = np.exp(-np.tensordot(1.0 / gammas**2, dsq, axes=1))
    R = K0 + eta * np.eye(n)
    try:
        fac = chol_factor(R, jitter_retry=False)
    except FactorizationError:
        return 1e25, np.zeros_like(z)
    alpha = cho_solve((fac.lower, True), ys)
    quad = float(ys @ alpha)
    nll = 0.5 * (quad / sig2 + n * np.log(sig2) + fac.log_det + n * np.log(2 * np.pi))

    rinv = cho_solve((fac.lower, True), np.eye(n))
    grad = np.empty_like(z)
    # d R / d log gamma_k = 2 dsq_k / gamma_k^2 * K0
    for k in range(d):
        dR = (2.0 / gammas[k] ** 2) * dsq[k] * K0
        grad[k] = -0.5 * (alpha @ dR @ alpha) / sig2 + 0.5 * np.sum(rinv * dR)
    grad[d] = -0.5 * quad / sig2 + 0.5 * n
    if fixed_nugget is None:
        grad[d + 1] = -0.5 * eta * float(alpha @ alpha) / sig2 + 0.5 * eta * np.trace(
            rinv
        )
    return nll, grad


def _pairwise_sq(X: np.ndarray) -> np.ndarray:
    """(d, n, n) array of per-dimension squared differences."""
    diff = X[:, None, :] - X[None, :, :]
    return np.moveaxis(diff**2, -1, 0)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _resolve_transforms(X, y, x_bounds, scale_inputs, standardize_output):
    d = X.shape[1]
    if scale_inputs:
        if x_bounds is not None:
            b = np.asarray(x_bounds, dtype=float).reshape(d, 2)
            lo, hi = b[:, 0], b[:, 1]
        else:
            lo, hi = X.min(axis=0), X.max(axis=0)
        rng = np.where(hi - lo > 0, hi - lo, 1.0)
        x_shift, x_scale = lo, rng
    else:
        x_shift, x_scale = np.zeros(d), np.ones(d)
    if standardize_output:
        y_shift = float(np.mean(y))
        y_scale = float(np.std(y))
        if y_scale == 0.0:
            raise GpFitError("outputs are constant (zero variance)")
        # keep the scale sane for near-constant data
        y_scale = max(y_scale, 1e-12)
    else:
        y_shift, y_scale = 0.0, 1.0
    return x_shift, x_scale, y_shift, y_scale


_LOG_GAMMA_BOUNDS = (np.log(1e-3), np.log(1e3))
_LOG_SIG2_BOUNDS = (np.log(1e-8), np.log(1e8))
_LOG_ETA_BOUNDS = (np.log(1e-8), np.log(1.0))


def gp_fit(
    X,
    y,
    fixed_nugget: float | None = None,
    seed: int = 0,
    *,
    x_bounds=None,
    scale_inputs: bool = True,
    standardize_output: bool = True,
    n_starts: int = 5,
    max_iter: int = 200,
    gtol: float = 1e-6,
    ftol: float = 1e-12,
    warm_start: KernelParams | None = None,
) -> GpModel:
    """Fit a GP by maximizing the log marginal likelihood.

    Multistart quasi-Newton (L-BFGS-B) ascent over log-lengthscales and
    log-variance; the nugget is fixed when ``fixed_nugget`` is given and
    otherwise optimized with a 1e-8 floor.  Deterministic given ``seed``.

    Args:
        X: (n, d) training inputs, distinct rows.
        y: (n,) training outputs.
        fixed_nugget: pin the nugget to this value instead of estimating it.
        seed: seed for the multistart draws.
        x_bounds: optional (d, 2) input-domain bounds used for the internal
            unit-cube mapping (defaults to the data range).
        warm_start: start the first (single) optimization at these params;
            used by SEM training to continue from the previous iteration.

    Raises:
        GpFitError: constant outputs, or factorization failure at optimum.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    if n < 2:
        raise GpFitError("need at least two training points")
    if y.size != n:
        raise ValueError("X and y size mismatch")
    if np.ptp(y) == 0.0:
        raise GpFitError("outputs are constant (zero variance)")

    x_shift, x_scale, y_shift, y_scale = _resolve_transforms(
        X, y, x_bounds, scale_inputs, standardize_output
    )
    xs = (X - x_shift) / x_scale
    ys = (y - y_shift) / y_scale
    dsq = _pairwise_sq(xs)

    n_par = d + 1 + (fixed_nugget is None)
    bounds = (
        [_LOG_GAMMA_BOUNDS] * d
        + [_LOG_SIG2_BOUNDS]
        + ([_LOG_ETA_BOUNDS] if fixed_nugget is None else [])
    )

    starts = []
    if warm_start is not None:
        z0 = np.concatenate(
            [
                np.log(warm_start.lengthscales),
                [np.log(warm_start.signal_variance)],
                [] if fixed_nugget is not None else [np.log(max(warm_start.nugget, 1e-8))],
            ]
        )
        starts.append(z0)
    else:
        base = np.concatenate(
            [np.zeros(d), [0.0], [] if fixed_nugget is not None else [np.log(1e-6)]]
        )
        starts.append(base)
        if n_starts > 1:
            rng = np.random.default_rng(seed)
            u = random_lhs(n_starts - 1, n_par, rng)
            lo = np.array([np.log(0.05)] * d + [np.log(0.1)] + [np.log(1e-7)] * (n_par - d - 1))
            hi = np.array([np.log(3.0)] * d + [np.log(10.0)] + [np.log(1e-3)] * (n_par - d - 1))
            for row in lo + u * (hi - lo):
                starts.append(row)

    best = None
    for z0 in starts:
        res = minimize(
            _nll_and_grad,
            z0,
            args=(dsq, ys, fixed_nugget),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iter, "gtol": gtol, "ftol": ftol},
        )
        if best is None or res.fun < best.fun:
            best = res
    gammas, sig2, eta = _unpack(best.x, d, fixed_nugget)
    params = KernelParams(lengthscales=gammas, signal_variance=sig2, nugget=eta)
    return _condition_scaled(X, y, params, x_shift, x_scale, y_shift, y_scale, xs, ys)


def gp_condition(
    X,
    y,
    params: KernelParams,
    *,
    x_bounds=None,
    scale_inputs: bool = False,
    standardize_output: bool = False,
) -> GpModel:
    """Build a GP with known hyperparameters (no optimization).

    ``params`` are interpreted in the internal coordinates implied by the
    scaling flags (identity transforms by default).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    x_shift, x_scale, y_shift, y_scale = _resolve_transforms(
        X, y, x_bounds, scale_inputs, standardize_output
    )
    xs = (X - x_shift) / x_scale
    ys = (y - y_shift) / y_scale
    return _condition_scaled(X, y, params, x_shift, x_scale, y_shift, y_scale, xs, ys)


def _condition_scaled(X, y, params, x_shift, x_scale, y_shift, y_scale, xs, ys):
    try:
        fac = chol_factor(correlation_matrix(params, xs))
    except FactorizationError as err:
        raise GpFitError(str(err)) from err
    alpha = cho_solve((fac.lower, True), ys)
    return GpModel(
        x_train=X,
        y_train=y,
        params=params,
        x_shift=np.asarray(x_shift, dtype=float),
        x_scale=np.asarray(x_scale, dtype=float),
        y_shift=y_shift,
        y_scale=y_scale,
        chol=fac,
        alpha=alpha,
        xs=xs,
    )


def log_marginal_likelihood(model: GpModel) -> float:
    """Log marginal likelihood of the training data under the model."""
    n = model.n
    ys = (model.y_train - model.y_shift) / model.y_scale
    sig2 = model.params.signal_variance
    quad = float(ys @ model.alpha)
    return -0.5 * (
        quad / sig2 + n * np.log(sig2) + model.chol.log_det + n * np.log(2 * np.pi)
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _cross_terms(model: GpModel, Xstar: np.ndarray):
    """Kernel vector r and its solve against R for a batch of points."""
    xs_star = model.scale_x(np.atleast_2d(Xstar))
    r = kernel_cross(model.params, xs_star, model.xs)  # (m, n)
    rinv_r = cho_solve((model.chol.lower, True), r.T)  # (n, m)
    return xs_star, r, rinv_r


def gp_predict_batch(model: GpModel, Xstar) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at each row of ``Xstar`` (original units)."""
    _, r, rinv_r = _cross_terms(model, Xstar)
    sig2, eta = model.params.signal_variance, model.params.nugget
    mean_s = r @ model.alpha
    var_s = sig2 * (1.0 + eta - np.sum(r * rinv_r.T, axis=1))
    var_s = _clamp_nonneg(var_s)
    return model.y_shift + model.y_scale * mean_s, model.y_scale**2 * var_s


def gp_predict(model: GpModel, xstar) -> GaussianPrediction:
    """Posterior predictive distribution at a single point."""
    mean, var = gp_predict_batch(model, np.atleast_2d(xstar))
    return GaussianPrediction(mean=float(mean[0]), variance=float(var[0]))


def _dr_batch(model: GpModel, xs_star: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(m, n, d) derivatives of the kernel vector wrt the scaled test point."""
    diff = xs_star[:, None, :] - model.xs[None, :, :]
    return -2.0 * diff / model.params.lengthscales**2 * r[:, :, None]


def gp_gradient_batch(model: GpModel, Xstar) -> tuple[np.ndarray, np.ndarray]:
    """Gradient-posterior means (m, d) and covariances (m, d, d)."""
    xs_star, r, _ = _cross_terms(model, Xstar)
    m, n, d = r.shape[0], model.n, model.dim
    dr = _dr_batch(model, xs_star, r)
    grad_mean_s = np.einsum("mnd,n->md", dr, model.alpha)
    flat = np.moveaxis(dr, 0, 1).reshape(n, m * d)
    z = cho_solve((model.chol.lower, True), flat).reshape(n, m, d)
    z = np.moveaxis(z, 1, 0)  # (m, n, d)
    sig2 = model.params.signal_variance
    h = kernel_hessian_diag(model.params)
    cov_s = sig2 * (np.diag(h)[None, :, :] - np.einsum("mnd,mne->mde", dr, z))
    # back to original units
    grad_mean = model.y_scale * grad_mean_s / model.x_scale
    scale_outer = np.outer(model.x_scale, model.x_scale)
    cov = model.y_scale**2 * cov_s / scale_outer
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    idx = np.arange(d)
    cov[:, idx, idx] = _clamp_nonneg(cov[:, idx, idx])
    return grad_mean, cov


def gp_gradient(model: GpModel, xstar) -> GradientPosterior:
    """Closed-form posterior over the emulator gradient at one point."""
    means, covs = gp_gradient_batch(model, np.atleast_2d(xstar))
    return GradientPosterior(mean=means[0], cov=covs[0])


def gp_mean_var_derivs_batch(model: GpModel, Xstar):
    """Mean, variance and their input-derivatives for a batch of points.

    Returns:
        (mean (m,), var (m,), dmean (m, d), dvar (m, d)), all in original
        units.  ``dvar`` is the derivative of the predictive variance,
        -2 sigma^2 Dr' R^{-1} r, used by the linked-emulator chain rule.
    """
    xs_star, r, rinv_r = _cross_terms(model, Xstar)
    sig2, eta = model.params.signal_variance, model.params.nugget
    mean_s = r @ model.alpha
    var_s = _clamp_nonneg(sig2 * (1.0 + eta - np.sum(r * rinv_r.T, axis=1)))
    dr = _dr_batch(model, xs_star, r)
    dmean_s = np.einsum("mnd,n->md", dr, model.alpha)
    dvar_s = -2.0 * sig2 * np.einsum("mnd,mn->md", dr, rinv_r.T)
    mean = model.y_shift + model.y_scale * mean_s
    var = model.y_scale**2 * var_s
    dmean = model.y_scale * dmean_s / model.x_scale
    dvar = model.y_scale**2 * dvar_s / model.x_scale
    return mean, var, dmean, dvar
