"""Two-layer linked GP emulator.

A linked GP composes p independent first-layer GPs (x -> w) with a single
second-layer GP (w -> y) and approximates the composite posterior by a
Gaussian whose mean and variance are available in closed form for the
squared-exponential kernel:

    mean(x*) = I(x*)' R(W)^{-1} y,
    var(x*)  = a' J(x*) a - mean(x*)^2 + sigma^2 (1 + eta - tr[R(W)^{-1} J(x*)]),

with a = R(W)^{-1} y and

    I_i  = prod_p E[k_p(w*_p, W_ip)]            (xi terms),
    J_ij = prod_p E[k_p(w*_p, W_ip) k_p(w*_p, W_jp)]   (psi terms),

the expectations taken over w*_p ~ N(mu_p(x*), var_p(x*)) from layer 1.
The gradient mean is the exact derivative of the mean above; the gradient
covariance uses a first-order (delta-method) linearization of the second
layer around the layer-1 posterior mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gp import (
    GaussianPrediction,
    GpModel,
    _clamp_nonneg,
    gp_gradient_batch,
    gp_mean_var_derivs_batch,
)
from .mathcore import chol_inverse

__all__ = [
    "LgpModel",
    "LinkTerms",
    "xi",
    "psi",
    "link_terms",
    "lgp_predict",
    "lgp_predict_batch",
    "lgp_gradient_mean",
    "lgp_gradient_mean_batch",
    "lgp_gradient_cov",
    "lgp_gradient_cov_batch",
    "lgp_score_batch",
    "dsigma2_dx",
]


@dataclass(frozen=True)
class LinkTerms:
    """Closed-form linking quantities at one prediction point."""

    I: np.ndarray  # (n,)
    J: np.ndarray  # (n, n), symmetric
    grad_I: np.ndarray  # (n, d)


@dataclass(frozen=True)
class LgpModel:
    """Two-layer linked GP: p first-layer GPs feeding one second-layer GP.

    Every first-layer GP must be trained on the same inputs, and the
    second layer's training inputs must be the column-stack of the
    first-layer training outputs.
    """

    layer1: tuple[GpModel, ...]
    layer2: GpModel

    def __post_init__(self):
        layer1 = tuple(self.layer1)
        object.__setattr__(self, "layer1", layer1)
        if not layer1:
            raise ValueError("need at least one first-layer GP")
        x0 = layer1[0].x_train
        for g in layer1[1:]:
            if g.x_train.shape != x0.shape or not np.array_equal(g.x_train, x0):
                raise ValueError("first-layer GPs must share training inputs")
        W = np.column_stack([g.y_train for g in layer1])
        if self.layer2.x_train.shape != W.shape or not np.allclose(
            self.layer2.x_train, W
        ):
            raise ValueError(
                "second-layer inputs must equal stacked first-layer outputs"
            )
        object.__setattr__(self, "_cache", _Layer2View.from_gp(self.layer2))

    @property
    def n(self) -> int:
        return self.layer1[0].n

    @property
    def dim(self) -> int:
        return self.layer1[0].dim

    @property
    def width(self) -> int:
        return len(self.layer1)

    @property
    def view(self) -> "_Layer2View":
        return self._cache


@dataclass(frozen=True)
class _Layer2View:
    """Second-layer quantities in original-unit form, precomputed once."""

    W: np.ndarray  # (n, p) training inputs in original units
    gammas: np.ndarray  # (p,) effective lengthscales in original units
    alpha: np.ndarray  # (n,) R(W)^{-1} y_standardized
    rinv: np.ndarray  # (n, n)
    sig2: float
    eta: float
    y_shift: float
    y_scale: float
    wbar: np.ndarray  # (p, n, n) pairwise midpoints of W columns
    wd2: np.ndarray  # (p, n, n) (W_i - W_j)^2 / (2 gamma^2)

    @classmethod
    def from_gp(cls, g: GpModel) -> "_Layer2View":
        W = g.x_train
        gammas = g.effective_lengthscales
        diff = W[:, None, :] - W[None, :, :]  # (n, n, p)
        wbar = np.moveaxis(0.5 * (W[:, None, :] + W[None, :, :]), -1, 0)
        wd2 = np.moveaxis(diff**2, -1, 0) / (2.0 * gammas[:, None, None] ** 2)
        return cls(
            W=W,
            gammas=gammas,
            alpha=g.alpha,
            rinv=chol_inverse(g.chol),
            sig2=g.params.signal_variance,
            eta=g.params.nugget,
            y_shift=g.y_shift,
            y_scale=g.y_scale,
            wbar=wbar,
            wd2=wd2,
        )


# ---------------------------------------------------------------------------
# xi / psi closed forms
# ---------------------------------------------------------------------------


def xi(mu_p: float, var_p: float, w_ip: float, gamma_p: float) -> float:
    """E[k(w*, w_ip)] for w* ~ N(mu_p, var_p) under the SE kernel."""
    if var_p < 0:
        raise ValueError("var_p must be nonnegative")
    g2 = gamma_p**2
    return float(
        math.exp(-((mu_p - w_ip) ** 2) / (2.0 * var_p + g2))
        / math.sqrt(1.0 + 2.0 * var_p / g2)
    )


def psi(mu_p: float, var_p: float, w_ip: float, w_jp: float, gamma_p: float) -> float:
    """E[k(w*, w_ip) k(w*, w_jp)] for w* ~ N(mu_p, var_p)."""
    if var_p < 0:
        raise ValueError("var_p must be nonnegative")
    g2 = gamma_p**2
    mid = 0.5 * (w_ip + w_jp)
    return float(
        math.exp(
            -((mid - mu_p) ** 2) / (0.5 * g2 + 2.0 * var_p)
            - (w_ip - w_jp) ** 2 / (2.0 * g2)
        )
        / math.sqrt(1.0 + 4.0 * var_p / g2)
    )


def _xi_terms(view: _Layer2View, mu1, var1, with_derivs: bool):
    """Per-latent-dimension xi values (and d xi / d mu, d xi / d var).

    Args:
        mu1, var1: (m, p) layer-1 posterior moments at the prediction batch.

    Returns:
        arrays of shape (p, m, n).
    """
    p = view.gammas.size
    m = mu1.shape[0]
    n = view.W.shape[0]
    xis = np.empty((p, m, n))
    dmu = np.empty((p, m, n)) if with_derivs else None
    dvar = np.empty((p, m, n)) if with_derivs else None
    for k in range(p):
        g2 = view.gammas[k] ** 2
        denom = 2.0 * var1[:, k] + g2  # (m,)
        amp = 1.0 / np.sqrt(1.0 + 2.0 * var1[:, k] / g2)  # (m,)
        diff = mu1[:, k, None] - view.W[None, :, k]  # (m, n)
        e = np.exp(-(diff**2) / denom[:, None])
        xis[k] = amp[:, None] * e
        if with_derivs:
            dmu[k] = xis[k] * (-2.0 * diff / denom[:, None])
            dvar[k] = xis[k] * (
                -1.0 / denom[:, None] + 2.0 * diff**2 / denom[:, None] ** 2
            )
    return xis, dmu, dvar


def _exclusive_products(xis: np.ndarray) -> np.ndarray:
    """prod over p' != p of xis[p'], computed without division (p, m, n)."""
    p = xis.shape[0]
    prefix = np.ones_like(xis)
    suffix = np.ones_like(xis)
    for k in range(1, p):
        prefix[k] = prefix[k - 1] * xis[k - 1]
        suffix[p - 1 - k] = suffix[p - k] * xis[p - k]
    return prefix * suffix


def _link_I_grad(view, mu1, var1, dmu1, dvar1):
    """I (m, n) and grad_I (m, n, d) from layer-1 moments and derivatives."""
    xis, dxi_dmu, dxi_dvar = _xi_terms(view, mu1, var1, with_derivs=True)
    I = np.prod(xis, axis=0)
    excl = _exclusive_products(xis)
    # d xi_p / d x = dxi/dmu * dmu_p/dx + dxi/dvar * dvar_p/dx
    dxi_dx = (
        dxi_dmu[..., None] * np.moveaxis(dmu1, 1, 0)[:, :, None, :]
        + dxi_dvar[..., None] * np.moveaxis(dvar1, 1, 0)[:, :, None, :]
    )  # (p, m, n, d)
    grad_I = np.einsum("pmnd,pmn->mnd", dxi_dx, excl)
    return I, grad_I


def _link_J(view, mu1, var1):
    """J (m, n, n) from layer-1 moments; memory scales with m * n^2."""
    p = view.gammas.size
    m = mu1.shape[0]
    n = view.W.shape[0]
    J = np.ones((m, n, n))
    for k in range(p):
        g2 = view.gammas[k] ** 2
        amp = 1.0 / np.sqrt(1.0 + 4.0 * var1[:, k] / g2)  # (m,)
        denom = 0.5 * g2 + 2.0 * var1[:, k]  # (m,)
        t = (view.wbar[k][None, :, :] - mu1[:, k, None, None]) ** 2 / denom[
            :, None, None
        ]
        J *= amp[:, None, None] * np.exp(-t - view.wd2[k][None, :, :])
    return J


def _layer1_moments(model: LgpModel, Xstar):
    """Stacked layer-1 posterior moments and derivatives at the batch."""
    m = Xstar.shape[0]
    p, d = model.width, model.dim
    mu = np.empty((m, p))
    var = np.empty((m, p))
    dmu = np.empty((m, p, d))
    dvar = np.empty((m, p, d))
    for k, g in enumerate(model.layer1):
        mu[:, k], var[:, k], dmu[:, k, :], dvar[:, k, :] = gp_mean_var_derivs_batch(
            g, Xstar
        )
    return mu, var, dmu, dvar


def link_terms(model: LgpModel, xstar) -> LinkTerms:
    """I vector, J matrix and the Jacobian of I at a single point."""
    Xstar = np.atleast_2d(np.asarray(xstar, dtype=float))
    mu1, var1, dmu1, dvar1 = _layer1_moments(model, Xstar)
    I, grad_I = _link_I_grad(model.view, mu1, var1, dmu1, dvar1)
    J = _link_J(model.view, mu1, var1)[0]
    return LinkTerms(I=I[0], J=0.5 * (J + J.T), grad_I=grad_I[0])


# ---------------------------------------------------------------------------
# prediction and gradients
# ---------------------------------------------------------------------------


def _chunks(m: int, chunk: int):
    for lo in range(0, m, chunk):
        yield lo, min(lo + chunk, m)


def _predict_core(view, mu1, var1, chunk=64):
    """Mean and variance (standardized scale) from layer-1 moments."""
    xis, _, _ = _xi_terms(view, mu1, var1, with_derivs=False)
    I = np.prod(xis, axis=0)
    mean_s = I @ view.alpha
    m = mu1.shape[0]
    quad = np.empty(m)
    tr = np.empty(m)
    for lo, hi in _chunks(m, chunk):
        J = _link_J(view, mu1[lo:hi], var1[lo:hi])
        quad[lo:hi] = np.einsum("mij,i,j->m", J, view.alpha, view.alpha)
        tr[lo:hi] = np.einsum("mij,ij->m", J, view.rinv)
    var_s = quad - mean_s**2 + view.sig2 * (1.0 + view.eta - tr)
    return mean_s, _clamp_nonneg(var_s)


def lgp_predict_batch(model: LgpModel, Xstar) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form predictive mean and variance at each row of ``Xstar``."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    mu1, var1, _, _ = _layer1_moments(model, Xstar)
    view = model.view
    mean_s, var_s = _predict_core(view, mu1, var1)
    return view.y_shift + view.y_scale * mean_s, view.y_scale**2 * var_s


def lgp_predict(model: LgpModel, xstar) -> GaussianPrediction:
    mean, var = lgp_predict_batch(model, np.atleast_2d(xstar))
    return GaussianPrediction(mean=float(mean[0]), variance=float(var[0]))


def lgp_gradient_mean_batch(model: LgpModel, Xstar) -> np.ndarray:
    """Gradient of the predictive mean, (m, d) in original units."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    mu1, var1, dmu1, dvar1 = _layer1_moments(model, Xstar)
    view = model.view
    _, grad_I = _link_I_grad(view, mu1, var1, dmu1, dvar1)
    return view.y_scale * np.einsum("mnd,n->md", grad_I, view.alpha)


def lgp_gradient_mean(model: LgpModel, xstar) -> np.ndarray:
    return lgp_gradient_mean_batch(model, np.atleast_2d(xstar))[0]


def _gradient_cov_core(model: LgpModel, Xstar, mu1) -> np.ndarray:
    """Delta-method gradient covariance (m, d, d).

    Sums the first-layer gradient covariances weighted by the squared
    sensitivities of the second layer, the latter evaluated at the
    layer-1 posterior mean vector.
    """
    g2_sens, _ = gp_gradient_batch(model.layer2, mu1)  # (m, p)
    m, d = Xstar.shape[0], model.dim
    cov = np.zeros((m, d, d))
    for k, g in enumerate(model.layer1):
        _, cov1 = gp_gradient_batch(g, Xstar)  # (m, d, d)
        cov += g2_sens[:, k, None, None] ** 2 * cov1
    return cov


def lgp_gradient_cov_batch(model: LgpModel, Xstar) -> np.ndarray:
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    mu1, _, _, _ = _layer1_moments(model, Xstar)
    return _gradient_cov_core(model, Xstar, mu1)


def lgp_gradient_cov(model: LgpModel, xstar) -> np.ndarray:
    return lgp_gradient_cov_batch(model, np.atleast_2d(xstar))[0]


def lgp_score_batch(model: LgpModel, Xstar, chunk: int = 64):
    """Predictive mean/variance and gradient mean/covariance in one pass.

    Shares the layer-1 posterior evaluation across all four outputs; this
    is the workhorse of candidate scoring in sequential design.

    Returns:
        (mean (m,), var (m,), grad_mean (m, d), grad_cov (m, d, d)).
    """
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    mu1, var1, dmu1, dvar1 = _layer1_moments(model, Xstar)
    view = model.view
    I, grad_I = _link_I_grad(view, mu1, var1, dmu1, dvar1)
    mean_s = I @ view.alpha
    m = Xstar.shape[0]
    quad = np.empty(m)
    tr = np.empty(m)
    for lo, hi in _chunks(m, chunk):
        J = _link_J(view, mu1[lo:hi], var1[lo:hi])
        quad[lo:hi] = np.einsum("mij,i,j->m", J, view.alpha, view.alpha)
        tr[lo:hi] = np.einsum("mij,ij->m", J, view.rinv)
    var_s = _clamp_nonneg(quad - mean_s**2 + view.sig2 * (1.0 + view.eta - tr))
    grad_mean = view.y_scale * np.einsum("mnd,n->md", grad_I, view.alpha)
    grad_cov = _gradient_cov_core(model, Xstar, mu1)
    return (
        view.y_shift + view.y_scale * mean_s,
        view.y_scale**2 * var_s,
        grad_mean,
        grad_cov,
    )


def dsigma2_dx(model1p: GpModel, xstar) -> np.ndarray:
    """Derivative of a GP's predictive variance with respect to the input.

    Equals -2 sigma^2 Dr(x*)' R^{-1} r(x*); verified against finite
    differences of the predictive variance in the test suite.
    """
    _, _, _, dvar = gp_mean_var_derivs_batch(model1p, np.atleast_2d(xstar))
    return dvar[0]
