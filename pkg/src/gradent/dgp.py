"""Two-layer deep GP emulator trained by stochastic imputation.

The hidden layer W is latent.  Training alternates an imputation step
(one sweep of elliptical slice sampling within Gibbs over the columns of
W) with a maximization step (per-GP marginal-likelihood fits given the
current W), then averages the post-burn-in parameter chain in log space.
At the averaged parameters, ``n_imp`` further W draws are taken and each
defines one concrete linked GP; predictions and gradient posteriors
aggregate the imputations by mixture moments.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .gp import (
    GaussianPrediction,
    GpModel,
    GradientPosterior,
    gp_condition,
    gp_fit,
    log_marginal_likelihood,
)
from .lgp import (
    LgpModel,
    lgp_gradient_cov_batch,
    lgp_gradient_mean_batch,
    lgp_predict_batch,
    lgp_score_batch,
)
from .mathcore import (
    CholFactor,
    FactorizationError,
    KernelParams,
    chol_factor,
    correlation_matrix,
)

__all__ = [
    "DgpConfig",
    "DgpTheta",
    "DgpModel",
    "SamplerError",
    "ess_update",
    "gibbs_sweep",
    "sem_train",
    "dgp_predict",
    "dgp_predict_batch",
    "dgp_gradient",
    "dgp_gradient_batch",
    "dgp_score_batch",
    "save_dgp",
    "load_dgp",
]


class SamplerError(RuntimeError):
    """Raised when the latent sampler encounters a NaN log-likelihood or
    fails to find an acceptable point."""

    def __init__(self, message: str, state: np.ndarray | None = None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class DgpConfig:
    """Training configuration for the two-layer DGP.

    Args:
        p: latent width; defaults to the input dimension.
        n_iter: SEM iterations T.
        burn_in_fraction: fraction of the chain discarded before averaging.
        n_imp: number of post-training imputations kept for prediction.
        thin: Gibbs sweeps between consecutive imputation draws.
        seed: RNG seed for the whole training run.
        layer1_nugget / layer2_nugget: fixed interpolation nuggets.
        m_step_max_iter: optimizer iteration cap for warm-started M-steps.
    """

    p: int | None = None
    n_iter: int = 500
    burn_in_fraction: float = 0.75
    n_imp: int = 10
    thin: int = 10
    seed: int = 0
    layer1_nugget: float = 1e-6
    layer2_nugget: float = 1e-6
    m_step_max_iter: int = 50

    def __post_init__(self):
        if not 0.0 < self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in (0, 1)")
        if self.n_imp < 1:
            raise ValueError("n_imp must be at least 1")
        if self.n_iter < 2:
            raise ValueError("n_iter must be at least 2")
        if self.p is not None and self.p < 1:
            raise ValueError("latent width p must be positive")


@dataclass(frozen=True)
class DgpTheta:
    """Hyperparameters of all sub-GPs: p first-layer plus one second-layer."""

    layer1: tuple[KernelParams, ...]
    layer2: KernelParams


@dataclass(frozen=True)
class DgpModel:
    """Trained two-layer DGP.

    ``imputed`` holds ``n_imp`` linked GPs sharing ``theta_hat`` and
    differing only in the latent draw W.  The linked GPs live in internal
    coordinates (inputs in the unit cube, outputs standardized); public
    prediction and gradient methods translate back to original units.
    """

    imputed: tuple[LgpModel, ...]
    theta_hat: DgpTheta
    trace: dict
    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: float
    y_scale: float
    config: DgpConfig
    x_train: np.ndarray = field(repr=False, default=None)  # original units
    y_train: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.x_train.shape[0]

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_imp(self) -> int:
        return len(self.imputed)

    def scale_x(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.x_shift) / self.x_scale


# ---------------------------------------------------------------------------
# elliptical slice sampling
# ---------------------------------------------------------------------------

_MAX_SHRINK = 1000


def ess_update(w_current, prior_chol: CholFactor, loglik, rng) -> np.ndarray:
    """One elliptical-slice-sampling update for a zero-mean Gaussian prior.

    Args:
        w_current: current state (n,).
        prior_chol: Cholesky factor of the prior covariance.
        loglik: log-likelihood function of the state.
        rng: numpy Generator.

    Returns:
        A new state whose stationary distribution is prior x likelihood.
    """
    # copy: callers may pass a view that their likelihood closure mutates
    w = np.array(w_current, dtype=float, copy=True)
    nu = prior_chol.lower @ rng.standard_normal(w.size)
    ll0 = float(loglik(w))
    if math.isnan(ll0):
        raise SamplerError("log-likelihood is NaN at the current state", w)
    log_y = ll0 + math.log(rng.uniform())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    theta_min, theta_max = theta - 2.0 * math.pi, theta
    for _ in range(_MAX_SHRINK):
        prop = w * math.cos(theta) + nu * math.sin(theta)
        ll = float(loglik(prop))
        if math.isnan(ll):
            raise SamplerError("log-likelihood is NaN at a proposal", prop)
        if ll > log_y:
            return prop
        if theta < 0.0:
            theta_min = theta
        else:
            theta_max = theta
        theta = rng.uniform(theta_min, theta_max)
    raise SamplerError("slice shrank to the current state without acceptance", w)


def _gauss_loglik(params: KernelParams, X: np.ndarray, y: np.ndarray) -> float:
    """Zero-mean GP marginal log-likelihood; -inf when factorization fails."""
    n = y.size
    try:
        fac = chol_factor(correlation_matrix(params, X))
    except FactorizationError:
        return -np.inf
    quad = float(y @ cho_solve((fac.lower, True), y))
    s2 = params.signal_variance
    return -0.5 * (quad / s2 + n * math.log(s2) + fac.log_det + n * math.log(2 * math.pi))


def gibbs_sweep(W, layer1_params, layer2_params, X, y, rng) -> np.ndarray:
    """One full Gibbs sweep over the latent columns of W.

    Each column k is refreshed by an ESS update whose prior is the GP
    prior of latent GP k over ``X`` and whose likelihood is the
    second-layer marginal likelihood of ``y`` given the partially updated
    W.

    Args:
        W: (n, p) current latent matrix.
        layer1_params: sequence of p KernelParams for the latent GPs.
        layer2_params: KernelParams of the second layer.
        X: (n, d) first-layer inputs (internal coordinates).
        y: (n,) outputs (internal coordinates).
        rng: numpy Generator.
    """
    W = np.array(W, dtype=float)
    n, p = W.shape
    for k in range(p):
        pk = layer1_params[k]
        fac = chol_factor(correlation_matrix(pk, X))
        prior_chol = CholFactor(lower=math.sqrt(pk.signal_variance) * fac.lower)

        def loglik(wcol, _k=k):
            W[:, _k] = wcol
            return _gauss_loglik(layer2_params, W, y)

        W[:, k] = ess_update(W[:, k], prior_chol, loglik, rng)
    return W


# ---------------------------------------------------------------------------
# SEM training
# ---------------------------------------------------------------------------


def _default_theta(d: int, p: int, cfg: DgpConfig) -> DgpTheta:
    layer1 = tuple(
        KernelParams(np.ones(d), 1.0, cfg.layer1_nugget) for _ in range(p)
    )
    layer2 = KernelParams(np.ones(p), 1.0, cfg.layer2_nugget)
    return DgpTheta(layer1=layer1, layer2=layer2)


def _theta_log_vector(theta: DgpTheta) -> np.ndarray:
    parts = []
    for pk in theta.layer1:
        parts.append(np.log(pk.lengthscales))
        parts.append([np.log(pk.signal_variance)])
    parts.append(np.log(theta.layer2.lengthscales))
    parts.append([np.log(theta.layer2.signal_variance)])
    return np.concatenate([np.asarray(q, dtype=float).ravel() for q in parts])


def _theta_from_log_vector(v: np.ndarray, d: int, p: int, cfg: DgpConfig) -> DgpTheta:
    vals = np.exp(v)
    layer1 = []
    pos = 0
    for _ in range(p):
        layer1.append(
            KernelParams(vals[pos : pos + d], float(vals[pos + d]), cfg.layer1_nugget)
        )
        pos += d + 1
    layer2 = KernelParams(vals[pos : pos + p], float(vals[pos + p]), cfg.layer2_nugget)
    return DgpTheta(layer1=tuple(layer1), layer2=layer2)


def sem_train(X, y, cfg: DgpConfig, *, x_bounds=None, theta_init: DgpTheta | None = None) -> DgpModel:
    """Train a two-layer DGP by stochastic expectation maximization.

    Alternates one Gibbs sweep of the latent layer (I-step) with per-GP
    maximum-likelihood updates warm-started at the previous parameters
    (M-step) for ``cfg.n_iter`` iterations.  Final parameters are the
    exponentiated average of the post-burn-in log-parameter chain; the
    latent layer is then re-imputed ``cfg.n_imp`` times (``cfg.thin``
    sweeps apart) at the fixed parameters to build the linked GPs.

    Deterministic given identical data, config and bounds.

    Args:
        X: (n, d) training inputs in original units.
        y: (n,) training outputs.
        cfg: training configuration.
        x_bounds: optional (d, 2) domain bounds for the internal unit-cube
            mapping; defaults to the data range.
        theta_init: warm-start parameters (internal coordinates), used by
            sequential design when retraining on an augmented dataset.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if np.any(np.isnan(X)) or np.any(np.isnan(y)):
        raise ValueError("training data contain NaNs")
    n, d = X.shape
    if y.size != n:
        raise ValueError("X and y size mismatch")
    if n < 2 * (d + 2):
        warnings.warn(
            f"only {n} training points for d={d}; SEM estimates may be unstable",
            stacklevel=2,
        )
    p = cfg.p if cfg.p is not None else d

    if x_bounds is not None:
        b = np.asarray(x_bounds, dtype=float).reshape(d, 2)
        lo, hi = b[:, 0], b[:, 1]
    else:
        lo, hi = X.min(axis=0), X.max(axis=0)
    x_scale = np.where(hi - lo > 0, hi - lo, 1.0)
    y_shift, y_scale = float(np.mean(y)), float(np.std(y))
    if y_scale == 0.0:
        raise ValueError("outputs are constant; nothing to emulate")
    xs = (X - lo) / x_scale
    ys = (y - y_shift) / y_scale

    rng = np.random.default_rng(cfg.seed)
    W = xs[:, [k % d for k in range(p)]].copy()
    theta = theta_init if theta_init is not None else _default_theta(d, p, cfg)

    loglik_trace = np.empty(cfg.n_iter)
    log_theta_trace = np.empty((cfg.n_iter, _theta_log_vector(theta).size))

    for t in range(cfg.n_iter):
        W = gibbs_sweep(W, theta.layer1, theta.layer2, xs, ys, rng)
        first = t == 0 and theta_init is None
        layer1_new = []
        ll = 0.0
        for k in range(p):
            g = gp_fit(
                xs,
                W[:, k],
                fixed_nugget=cfg.layer1_nugget,
                seed=cfg.seed,
                scale_inputs=False,
                standardize_output=False,
                n_starts=5 if first else 1,
                max_iter=200 if first else cfg.m_step_max_iter,
                gtol=1e-6 if first else 1e-5,
                ftol=1e-12 if first else 1e-9,
                warm_start=None if first else theta.layer1[k],
            )
            layer1_new.append(g.params)
            ll += log_marginal_likelihood(g)
        g2 = gp_fit(
            W,
            ys,
            fixed_nugget=cfg.layer2_nugget,
            seed=cfg.seed,
            scale_inputs=False,
            standardize_output=False,
            n_starts=5 if first else 1,
            max_iter=200 if first else cfg.m_step_max_iter,
            gtol=1e-6 if first else 1e-5,
            ftol=1e-12 if first else 1e-9,
            warm_start=None if first else theta.layer2,
        )
        ll += log_marginal_likelihood(g2)
        theta = DgpTheta(layer1=tuple(layer1_new), layer2=g2.params)
        loglik_trace[t] = ll
        log_theta_trace[t] = _theta_log_vector(theta)

    burn = int(cfg.n_iter * cfg.burn_in_fraction)
    theta_hat = _theta_from_log_vector(
        np.mean(log_theta_trace[burn:], axis=0), d, p, cfg
    )

    imputed = []
    w_draws = np.empty((cfg.n_imp, n, p))
    for i in range(cfg.n_imp):
        for _ in range(cfg.thin):
            W = gibbs_sweep(W, theta_hat.layer1, theta_hat.layer2, xs, ys, rng)
        w_draws[i] = W
        imputed.append(_build_lgp(xs, ys, W, theta_hat))

    trace = {
        "loglik": loglik_trace,
        "log_params": log_theta_trace,
        "w_draws": w_draws,
    }
    return DgpModel(
        imputed=tuple(imputed),
        theta_hat=theta_hat,
        trace=trace,
        x_shift=lo,
        x_scale=x_scale,
        y_shift=y_shift,
        y_scale=y_scale,
        config=cfg,
        x_train=X,
        y_train=y,
    )


def _build_lgp(xs, ys, W, theta: DgpTheta) -> LgpModel:
    layer1 = tuple(
        gp_condition(xs, W[:, k], theta.layer1[k]) for k in range(W.shape[1])
    )
    layer2 = gp_condition(W.copy(), ys, theta.layer2)
    return LgpModel(layer1=layer1, layer2=layer2)


# ---------------------------------------------------------------------------
# prediction and gradient aggregation
# ---------------------------------------------------------------------------


def _mixture_moments(means: np.ndarray, variances: np.ndarray):
    """Aggregate per-imputation (mean, var) rows into mixture moments."""
    mu = np.mean(means, axis=0)
    var = np.mean(means**2 + variances, axis=0) - mu**2
    return mu, np.maximum(var, 0.0)


def dgp_predict_batch(model: DgpModel, Xstar) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated predictive mean and variance at each row of ``Xstar``."""
    xs = model.scale_x(np.atleast_2d(Xstar))
    means = np.empty((model.n_imp, xs.shape[0]))
    variances = np.empty_like(means)
    for i, lgp in enumerate(model.imputed):
        means[i], variances[i] = lgp_predict_batch(lgp, xs)
    mu, var = _mixture_moments(means, variances)
    return model.y_shift + model.y_scale * mu, model.y_scale**2 * var


def dgp_predict(model: DgpModel, xstar) -> GaussianPrediction:
    mean, var = dgp_predict_batch(model, np.atleast_2d(xstar))
    return GaussianPrediction(mean=float(mean[0]), variance=float(var[0]))


def dgp_gradient_batch(model: DgpModel, Xstar) -> tuple[np.ndarray, np.ndarray]:
    """Imputation-averaged gradient means (m, d) and covariances (m, d, d)."""
    xs = model.scale_x(np.atleast_2d(Xstar))
    m, d = xs.shape
    gm = np.zeros((m, d))
    gc = np.zeros((m, d, d))
    for lgp in model.imputed:
        gm += lgp_gradient_mean_batch(lgp, xs)
        gc += lgp_gradient_cov_batch(lgp, xs)
    gm /= model.n_imp
    gc /= model.n_imp
    scale_outer = np.outer(model.x_scale, model.x_scale)
    return (
        model.y_scale * gm / model.x_scale,
        model.y_scale**2 * gc / scale_outer,
    )


def dgp_gradient(model: DgpModel, xstar) -> GradientPosterior:
    means, covs = dgp_gradient_batch(model, np.atleast_2d(xstar))
    return GradientPosterior(mean=means[0], cov=covs[0])


def dgp_score_batch(model: DgpModel, Xstar):
    """Predictive and gradient posteriors in one pass over the imputations.

    Returns:
        (mean (m,), var (m,), grad_mean (m, d), grad_cov (m, d, d)) in
        original units; the single evaluation of the first layer per
        imputation is shared across all four outputs.
    """
    xs = model.scale_x(np.atleast_2d(Xstar))
    m, d = xs.shape
    means = np.empty((model.n_imp, m))
    variances = np.empty_like(means)
    gm = np.zeros((m, d))
    gc = np.zeros((m, d, d))
    for i, lgp in enumerate(model.imputed):
        mu, var, g_mean, g_cov = lgp_score_batch(lgp, xs)
        means[i], variances[i] = mu, var
        gm += g_mean
        gc += g_cov
    mu, var = _mixture_moments(means, variances)
    gm /= model.n_imp
    gc /= model.n_imp
    scale_outer = np.outer(model.x_scale, model.x_scale)
    return (
        model.y_shift + model.y_scale * mu,
        model.y_scale**2 * var,
        model.y_scale * gm / model.x_scale,
        model.y_scale**2 * gc / scale_outer,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def save_dgp(model: DgpModel, path):
    """Serialize a trained DGP to a single ``.npz`` container.

    The file stores the training data, transforms, averaged parameters and
    the ``n_imp`` latent draws; reloading reconstructs the linked GPs
    exactly, so round-tripped predictions are bit-identical.
    """
    t = model.theta_hat
    p = len(t.layer1)
    xs = model.scale_x(model.x_train)
    w = np.stack(
        [np.column_stack([g.y_train for g in lgp.layer1]) for lgp in model.imputed]
    )
    np.savez(
        path,
        format_version=_FORMAT_VERSION,
        x_train=model.x_train,
        y_train=model.y_train,
        x_shift=model.x_shift,
        x_scale=model.x_scale,
        y_shift=model.y_shift,
        y_scale=model.y_scale,
        xs=xs,
        w_imputations=w,
        layer1_lengthscales=np.stack([pk.lengthscales for pk in t.layer1]),
        layer1_signal_variance=np.array([pk.signal_variance for pk in t.layer1]),
        layer1_nugget=np.array([pk.nugget for pk in t.layer1]),
        layer2_lengthscales=t.layer2.lengthscales,
        layer2_signal_variance=t.layer2.signal_variance,
        layer2_nugget=t.layer2.nugget,
        trace_loglik=model.trace.get("loglik", np.empty(0)),
        trace_log_params=model.trace.get("log_params", np.empty((0, 0))),
        cfg_p=p,
        cfg_n_iter=model.config.n_iter,
        cfg_burn_in_fraction=model.config.burn_in_fraction,
        cfg_n_imp=model.config.n_imp,
        cfg_thin=model.config.thin,
        cfg_seed=model.config.seed,
        cfg_layer1_nugget=model.config.layer1_nugget,
        cfg_layer2_nugget=model.config.layer2_nugget,
        cfg_m_step_max_iter=model.config.m_step_max_iter,
    )


def load_dgp(path) -> DgpModel:
    """Reload a DGP saved by :func:`save_dgp`."""
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        p = int(z["cfg_p"])
        cfg = DgpConfig(
            p=p,
            n_iter=int(z["cfg_n_iter"]),
            burn_in_fraction=float(z["cfg_burn_in_fraction"]),
            n_imp=int(z["cfg_n_imp"]),
            thin=int(z["cfg_thin"]),
            seed=int(z["cfg_seed"]),
            layer1_nugget=float(z["cfg_layer1_nugget"]),
            layer2_nugget=float(z["cfg_layer2_nugget"]),
            m_step_max_iter=int(z["cfg_m_step_max_iter"]),
        )
        layer1 = tuple(
            KernelParams(
                z["layer1_lengthscales"][k],
                float(z["layer1_signal_variance"][k]),
                float(z["layer1_nugget"][k]),
            )
            for k in range(p)
        )
        theta = DgpTheta(
            layer1=layer1,
            layer2=KernelParams(
                z["layer2_lengthscales"],
                float(z["layer2_signal_variance"]),
                float(z["layer2_nugget"]),
            ),
        )
        xs = z["xs"]
        ys = (z["y_train"] - float(z["y_shift"])) / float(z["y_scale"])
        imputed = tuple(_build_lgp(xs, ys, w, theta) for w in z["w_imputations"])
        trace = {"loglik": z["trace_loglik"], "log_params": z["trace_log_params"]}
        return DgpModel(
            imputed=imputed,
            theta_hat=theta,
            trace=trace,
            x_shift=z["x_shift"],
            x_scale=z["x_scale"],
            y_shift=float(z["y_shift"]),
            y_scale=float(z["y_scale"]),
            config=cfg,
            x_train=z["x_train"],
            y_train=z["y_train"],
        )
