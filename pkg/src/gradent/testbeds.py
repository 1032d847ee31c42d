"""Target functions for benchmarks and sequential-design experiments.

Three families: a nonlinear sine composition with analytic gradient, a
plateau function whose sharp transition sits on the hyperplane
sum(x) = -4/alpha, and the Lorenz-63 system summarized by its Nusselt
number over the (Ra, Pr) plane.  A second-order central finite-difference
helper provides the gradient baseline used in comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from numba import njit

from .mathcore import std_normal_cdf

__all__ = [
    "Testbed",
    "OdeConfig",
    "DivergenceError",
    "sin_testfn",
    "plateau",
    "plateau_grad",
    "lorenz63_nusselt",
    "lorenz63_nusselt_batch",
    "transition_lines_lorenz",
    "fd_gradient",
    "FdResult",
    "make_sin_testbed",
    "make_plateau_testbed",
    "make_lorenz_testbed",
    "testbed_by_name",
]


class DivergenceError(RuntimeError):
    """Trajectory blow-up during ODE integration."""

    def __init__(self, time: float):
        self.time = time
        super().__init__(f"trajectory diverged at t={time:.3f}")


@dataclass(frozen=True)
class Testbed:
    """A target function with domain metadata.

    ``region_distance`` measures how far a point is from the sharp-variation
    surface (zero on it); testbeds without a known transition leave it None.
    """

    name: str
    dim: int
    bounds: np.ndarray  # (d, 2)
    f: Callable[[np.ndarray], float]
    f_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    region_distance: Optional[Callable[[np.ndarray], float]] = None

    def evaluate(self, x) -> float:
        return float(self.f(np.asarray(x, dtype=float)))

    def evaluate_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.f_batch is not None:
            return np.asarray(self.f_batch(X), dtype=float)
        return np.array([self.f(row) for row in X], dtype=float)


# ---------------------------------------------------------------------------
# sine composition
# ---------------------------------------------------------------------------


def sin_testfn(x) -> tuple[float, np.ndarray]:
    """f(x) = sin(1 / prod_i(0.7 x_i + 0.3)) with its analytic gradient."""
    x = np.asarray(x, dtype=float).ravel()
    factors = 0.7 * x + 0.3
    prod = float(np.prod(factors))
    if prod == 0.0:
        raise ValueError("sin test function undefined: factor product is zero")
    inv = 1.0 / prod
    val = math.sin(inv)
    grad = -0.7 * math.cos(inv) / (factors * prod)
    return val, grad


def make_sin_testbed(d: int) -> Testbed:
    bounds = np.tile([0.0, 1.0], (d, 1))

    def f_batch(X):
        factors = 0.7 * X + 0.3
        return np.sin(1.0 / np.prod(factors, axis=1))

    return Testbed(
        name=f"sin{d}d",
        dim=d,
        bounds=bounds,
        f=lambda x: sin_testfn(x)[0],
        f_batch=f_batch,
        grad=lambda x: sin_testfn(x)[1],
    )


# ---------------------------------------------------------------------------
# plateau
# ---------------------------------------------------------------------------


def plateau(x, alpha: float = 24.0) -> float:
    """2 Phi(sqrt(2) (-4 - alpha sum(x))) - 1 on [-1, 1]^d."""
    s = float(np.sum(np.asarray(x, dtype=float)))
    return float(2.0 * std_normal_cdf(math.sqrt(2.0) * (-4.0 - alpha * s)) - 1.0)


def plateau_grad(x, alpha: float = 24.0) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    arg = math.sqrt(2.0) * (-4.0 - alpha * float(np.sum(x)))
    dens = math.exp(-0.5 * arg * arg) / math.sqrt(2.0 * math.pi)
    return np.full(x.size, -2.0 * math.sqrt(2.0) * alpha * dens)


def make_plateau_testbed(d: int, alpha: float = 24.0) -> Testbed:
    bounds = np.tile([-1.0, 1.0], (d, 1))

    def f_batch(X):
        s = np.sum(X, axis=1)
        return 2.0 * std_normal_cdf(math.sqrt(2.0) * (-4.0 - alpha * s)) - 1.0

    def region_distance(x):
        # Euclidean distance to the hyperplane sum(x) = -4 / alpha
        s = float(np.sum(np.asarray(x, dtype=float)))
        return abs(s + 4.0 / alpha) / math.sqrt(d)

    return Testbed(
        name=f"plateau{d}d",
        dim=d,
        bounds=bounds,
        f=lambda x: plateau(x, alpha),
        f_batch=f_batch,
        grad=lambda x: plateau_grad(x, alpha),
        region_distance=region_distance,
    )


# ---------------------------------------------------------------------------
# Lorenz-63 / Nusselt number
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OdeConfig:
    """Fixed-step RK4 integration settings for the Lorenz system."""

    dt: float = 0.01
    t_total: float = 500.0
    transient_fraction: float = 0.2
    initial_state: tuple[float, float, float] = (1.0, 1.0, 1.0)
    beta: float = 8.0 / 3.0
    blowup_norm: float = 1e8

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.transient_fraction < 1.0:
            raise ValueError("transient_fraction must lie in [0, 1)")


@njit(cache=True)
def _integrate_lorenz(sigma, rho, beta, dt, n_steps, n_transient, s0, blowup_sq):
    """RK4 integration of independent Lorenz trajectories.

    Returns the post-transient z sums, an alive mask and blow-up times.
    """
    m = sigma.size
    z_sum = np.zeros(m)
    alive = np.ones(m, dtype=np.bool_)
    blowup_time = np.full(m, np.nan)
    for i in range(m):
        si, ri = sigma[i], rho[i]
        x, y, z = s0[0], s0[1], s0[2]
        acc = 0.0
        for step in range(1, n_steps + 1):
            k1x = si * (y - x)
            k1y = x * (ri - z) - y
            k1z = x * y - beta * z
            x2, y2, z2 = x + 0.5 * dt * k1x, y + 0.5 * dt * k1y, z + 0.5 * dt * k1z
            k2x = si * (y2 - x2)
            k2y = x2 * (ri - z2) - y2
            k2z = x2 * y2 - beta * z2
            x3, y3, z3 = x + 0.5 * dt * k2x, y + 0.5 * dt * k2y, z + 0.5 * dt * k2z
            k3x = si * (y3 - x3)
            k3y = x3 * (ri - z3) - y3
            k3z = x3 * y3 - beta * z3
            x4, y4, z4 = x + dt * k3x, y + dt * k3y, z + dt * k3z
            k4x = si * (y4 - x4)
            k4y = x4 * (ri - z4) - y4
            k4z = x4 * y4 - beta * z4
            x += (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            y += (dt / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            z += (dt / 6.0) * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
            if x * x + y * y + z * z > blowup_sq:
                alive[i] = False
                blowup_time[i] = step * dt
                break
            if step > n_transient:
                acc += z
        z_sum[i] = acc
    return z_sum, alive, blowup_time


def lorenz63_nusselt_batch(pr, ra, cfg: OdeConfig | None = None):
    """Nusselt numbers for arrays of (Pr, Ra) pairs.

    Integrates the Lorenz-63 system with classical RK4 (sigma = Pr,
    rho = Ra), averages z over the post-transient window and returns
    Nu = 2 (z_inf - z0) / rho.

    Returns:
        (nu, diverged, blowup_time): Nu values (NaN where diverged), a
        boolean divergence mask and per-point blow-up times (NaN where
        the trajectory stayed bounded).
    """
    if cfg is None:
        cfg = OdeConfig()
    sigma = np.atleast_1d(np.asarray(pr, dtype=float))
    rho = np.atleast_1d(np.asarray(ra, dtype=float))
    if sigma.shape != rho.shape:
        raise ValueError("pr and ra must have identical shapes")
    n_steps = int(round(cfg.t_total / cfg.dt))
    n_transient = int(cfg.transient_fraction * n_steps)
    z_sum, alive, blowup_time = _integrate_lorenz(
        sigma.ravel(),
        rho.ravel(),
        cfg.beta,
        cfg.dt,
        n_steps,
        n_transient,
        np.asarray(cfg.initial_state, dtype=float),
        cfg.blowup_norm**2,
    )
    z_inf = z_sum / (n_steps - n_transient)
    nu = 2.0 * (z_inf - cfg.initial_state[2]) / rho.ravel()
    nu[~alive] = np.nan
    return nu, ~alive, blowup_time


def lorenz63_nusselt(pr: float, ra: float, cfg: OdeConfig | None = None) -> float:
    """Nusselt number for a single (Pr, Ra) pair.

    Raises:
        DivergenceError: when the trajectory norm exceeds the blow-up
            threshold, carrying the blow-up time.
    """
    nu, diverged, t_blow = lorenz63_nusselt_batch([pr], [ra], cfg)
    if diverged[0]:
        raise DivergenceError(float(t_blow[0]))
    return float(nu[0])


_LORENZ_BOUNDS = np.array([[15.0, 115.0], [0.1, 100.1]])  # (Ra, Pr)


def transition_lines_lorenz(pr: float, ra: float, beta: float = 8.0 / 3.0) -> float:
    """Distance, in normalized (Ra, Pr) coordinates, to the nearer of the
    two analytic transition lines sigma = rho - 2(beta + 2) and
    sigma = beta + 1."""
    (ra_lo, ra_hi), (pr_lo, pr_hi) = _LORENZ_BOUNDS
    u = (ra - ra_lo) / (ra_hi - ra_lo)
    v = (pr - pr_lo) / (pr_hi - pr_lo)
    # line 1: Pr = Ra - 2 (beta + 2), slope 1 in normalized coordinates
    c1 = (ra_lo - 2.0 * (beta + 2.0) - pr_lo) / (pr_hi - pr_lo)
    d1 = abs(v - u - c1) / math.sqrt(2.0)
    # line 2: Pr = beta + 1, horizontal
    v2 = (beta + 1.0 - pr_lo) / (pr_hi - pr_lo)
    d2 = abs(v - v2)
    return min(d1, d2)


def make_lorenz_testbed(cfg: OdeConfig | None = None) -> Testbed:
    """Lorenz-63 Nusselt testbed over x = (Ra, Pr)."""
    if cfg is None:
        cfg = OdeConfig()

    def f(x):
        return lorenz63_nusselt(float(x[1]), float(x[0]), cfg)

    def f_batch(X):
        nu, diverged, _ = lorenz63_nusselt_batch(X[:, 1], X[:, 0], cfg)
        return nu  # NaN marks diverged points

    def region_distance(x):
        return transition_lines_lorenz(float(x[1]), float(x[0]), cfg.beta)

    return Testbed(
        name="lorenz63",
        dim=2,
        bounds=_LORENZ_BOUNDS.copy(),
        f=f,
        f_batch=f_batch,
        region_distance=region_distance,
    )


def testbed_by_name(name: str, **kwargs) -> Testbed:
    """Look up a testbed by its configuration name, e.g. ``plateau2d``."""
    if name.startswith("plateau"):
        d = int(name.removeprefix("plateau").removesuffix("d"))
        return make_plateau_testbed(d, **kwargs)
    if name.startswith("sin"):
        d = int(name.removeprefix("sin").removesuffix("d"))
        return make_sin_testbed(d, **kwargs)
    if name == "lorenz63":
        return make_lorenz_testbed(**kwargs)
    raise ValueError(f"unknown testbed {name!r}")


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


class FdResult(NamedTuple):
    gradient: np.ndarray  # (d,)
    onesided: np.ndarray  # (d,) bool, True where a boundary forced one-sided


def fd_gradient(f, x, h: float = 1e-6, bounds=None) -> FdResult:
    """Second-order central finite-difference gradient of ``f`` at ``x``.

    Falls back to a one-sided difference in any coordinate where the
    stencil would leave the given bounds; the affected coordinates are
    flagged in the result.
    """
    x = np.asarray(x, dtype=float).ravel()
    d = x.size
    grad = np.empty(d)
    onesided = np.zeros(d, dtype=bool)
    if bounds is not None:
        bounds = np.asarray(bounds, dtype=float).reshape(d, 2)
    for i in range(d):
        lo_ok = bounds is None or x[i] - h >= bounds[i, 0]
        hi_ok = bounds is None or x[i] + h <= bounds[i, 1]
        xp, xm = x.copy(), x.copy()
        if lo_ok and hi_ok:
            xp[i] += h
            xm[i] -= h
            grad[i] = (f(xp) - f(xm)) / (2.0 * h)
        elif hi_ok:
            xp[i] += h
            grad[i] = (f(xp) - f(x)) / h
            onesided[i] = True
        else:
            xm[i] -= h
            grad[i] = (f(x) - f(xm)) / h
            onesided[i] = True
    return FdResult(gradient=grad, onesided=onesided)
