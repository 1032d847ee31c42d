"""Distribution of the emulator gradient norm.

For a Gaussian gradient with diagonal covariance the scaled norm follows a
non-central chi distribution; the exceedance probability

    p_x = P(||grad|| >= l) = 1 - F_chi(l / S; d, lambda_chi)

with noncentrality lambda_chi = sqrt(sum_i (mu_i / sd_i)^2) and norm scale
S = sqrt(sum_i sd_i^2) drives the entropy acquisition criterion.  The
first two moments of the squared norm are available for any (possibly
non-diagonal) covariance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

from .gp import GradientPosterior

__all__ = [
    "GradNormDist",
    "noncentral_chi_cdf",
    "make_dist",
    "exceedance_prob",
    "gradnorm_sq_moments",
]

logger = logging.getLogger(__name__)

_TAIL_TOL = 1e-12
_MAX_TERMS = 10_000
_SD_FLOOR = 1e-10


def noncentral_chi_cdf(y: float, k: int, lam: float) -> float:
    """CDF of the non-central chi distribution at ``y``.

    Computed as the non-central chi-square CDF at y^2 with noncentrality
    lam^2, i.e. the Poisson(lam^2 / 2)-weighted mixture of central
    chi-square CDFs.  Terms are accumulated outward from the Poisson mode
    until the unaccounted weight drops below 1e-12 (capped at 10,000 terms
    with a logged warning).
    """
    if y < 0:
        raise ValueError("y must be nonnegative")
    if k < 1:
        raise ValueError("degrees of freedom must be a positive integer")
    if lam < 0:
        raise ValueError("noncentrality must be nonnegative")
    if y == 0.0:
        return 0.0
    x_half = 0.5 * y * y  # central chi-square CDF argument / 2
    if lam == 0.0:
        return float(gammainc(0.5 * k, x_half))

    rate = 0.5 * lam * lam

    def log_pois(j: int) -> float:
        return -rate + j * math.log(rate) - math.lgamma(j + 1)

    def term(j: int) -> tuple[float, float]:
        w = math.exp(log_pois(j))
        return w, w * float(gammainc(0.5 * k + j, x_half))

    mode = int(rate)
    w0, t0 = term(mode)
    total, weight = t0, w0
    lo, hi = mode - 1, mode + 1
    n_terms = 1
    while weight < 1.0 - _TAIL_TOL and n_terms < _MAX_TERMS:
        w_lo = -1.0
        if lo >= 0:
            w_lo, t_lo = term(lo)
        w_hi, t_hi = term(hi)
        # take the heavier side first so truncation favors large terms
        if w_lo >= w_hi:
            weight += w_lo
            total += t_lo
            lo -= 1
        else:
            weight += w_hi
            total += t_hi
            hi += 1
        n_terms += 1
    if n_terms >= _MAX_TERMS and weight < 1.0 - _TAIL_TOL:
        logger.warning(
            "noncentral_chi_cdf series hit the %d-term cap (lambda=%.3g); "
            "unaccounted weight %.2e",
            _MAX_TERMS,
            lam,
            1.0 - weight,
        )
    return float(min(total, 1.0))


@dataclass(frozen=True)
class GradNormDist:
    """Per-point distribution of the gradient norm.

    ``norm_scale`` and ``noncentrality`` are recomputable from the stored
    per-dimension means and standard deviations.
    """

    dof: int
    noncentrality: float
    norm_scale: float
    mean: np.ndarray  # (d,)
    sd: np.ndarray  # (d,), floored at 1e-10


def make_dist(grad: GradientPosterior) -> GradNormDist:
    """Build the gradient-norm distribution from a gradient posterior.

    Off-diagonal covariance entries are dropped (they do not change the
    total uncertainty entering the norm scale); zero variances are floored
    to avoid dividing by zero in the noncentrality.
    """
    mean = np.asarray(grad.mean, dtype=float)
    var = np.clip(np.diag(np.asarray(grad.cov, dtype=float)), 0.0, None)
    sd = np.maximum(np.sqrt(var), _SD_FLOOR)
    lam = float(np.sqrt(np.sum((mean / sd) ** 2)))
    scale = float(np.sqrt(np.sum(sd**2)))
    return GradNormDist(
        dof=mean.size, noncentrality=lam, norm_scale=scale, mean=mean, sd=sd
    )


def exceedance_prob(dist: GradNormDist, l: float) -> float:
    """P(gradient norm >= l) = 1 - F_chi(l / S; d, lambda_chi)."""
    if l < 0:
        raise ValueError("threshold must be nonnegative")
    return 1.0 - noncentral_chi_cdf(l / dist.norm_scale, dist.dof, dist.noncentrality)


def gradnorm_sq_moments(grad: GradientPosterior) -> tuple[float, float]:
    """Mean and variance of the squared gradient norm.

    mu_Q  = sum_i (mu_i^2 + Sigma_ii)
    var_Q = 4 mu' Sigma mu + 2 tr(Sigma^2)

    Uses the full covariance, not just its diagonal.
    """
    mu = np.asarray(grad.mean, dtype=float)
    cov = np.asarray(grad.cov, dtype=float)
    mu_q = float(np.sum(mu**2) + np.trace(cov))
    var_q = float(4.0 * mu @ cov @ mu + 2.0 * np.sum(cov * cov.T))
    return mu_q, var_q
