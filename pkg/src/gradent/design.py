"""Gradient-entropy sequential design (GradEnt) and the ALM baseline.

Each step scores a candidate set with the DGP emulator: the gradient-norm
exceedance probability p_x (threshold = the running Lipschitz estimate
L_DGP) feeds a binary-entropy criterion, and new points are drawn
uniformly from the Pareto frontier of (entropy, predictive variance) to
balance transition-hunting against space-filling.  ALM instead picks the
candidate with the largest predictive variance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dgp import DgpConfig, DgpModel, dgp_predict_batch, dgp_score_batch, sem_train
from .gp import GradientPosterior
from .gradnorm import exceedance_prob, make_dist
from .mathcore import maximin_lhs
from .testbeds import DivergenceError, Testbed

__all__ = [
    "DesignConfig",
    "DesignState",
    "DesignTrace",
    "AcqPoint",
    "DesignStepError",
    "entropy_criterion",
    "update_lipschitz",
    "pareto_front",
    "gradent_step",
    "alm_step",
    "run_design",
    "write_acquisition_log",
    "acq_log_header",
    "acq_log_row",
]


class DesignStepError(RuntimeError):
    """A design step could not obtain a usable evaluation."""


@dataclass(frozen=True)
class DesignConfig:
    """Sequential-design settings.

    Args:
        n0: initial space-filling design size.
        n_total: total evaluation budget N (n0 initial + N - n0 sequential).
        n_cand: candidate-set size per iteration.
        delta: pruning tolerance for the Lipschitz update, in (0, 1).
        candidate_refresh: 'per-iteration' redraws the candidate set each
            step; 'fixed' draws it once at the start.
        seed: master seed for the whole run.
        dgp: emulator training configuration (first full fit).
        refit_n_iter: SEM iterations for the warm-started refits.
    """

    n0: int
    n_total: int
    n_cand: int
    delta: float = 0.85
    candidate_refresh: str = "per-iteration"
    seed: int = 0
    dgp: DgpConfig = field(default_factory=DgpConfig)
    refit_n_iter: int = 100

    def __post_init__(self):
        if not self.n0 < self.n_total:
            raise ValueError("need n0 < n_total")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.n_cand < 2:
            raise ValueError("n_cand must be at least 2")
        if self.candidate_refresh not in ("per-iteration", "fixed"):
            raise ValueError("candidate_refresh must be 'per-iteration' or 'fixed'")


@dataclass(frozen=True)
class AcqPoint:
    """Acquisition quantities for one candidate."""

    x: np.ndarray
    p_x: float
    j_ent: float
    pred_var: float
    grad_norm_mean: float


@dataclass
class DesignState:
    """Evolving dataset, current emulator and acquisition history."""

    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    emulator: DgpModel
    l_hist: list = field(default_factory=list)
    iteration: int = 0
    log: list = field(default_factory=list)
    fixed_candidates: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class DesignTrace:
    """Result of a full sequential-design run."""

    method: str
    config: DesignConfig
    state: DesignState
    checkpoints: tuple  # ((design size, DgpModel), ...)

    @property
    def log(self) -> list:
        return self.state.log


# ---------------------------------------------------------------------------
# acquisition primitives
# ---------------------------------------------------------------------------


def entropy_criterion(p: float) -> float:
    """Binary entropy -p log p - (1 - p) log(1 - p), natural log."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log(p) - (1.0 - p) * math.log(1.0 - p)


def update_lipschitz(cands, prev_l: float, delta: float, first_iter: bool) -> float:
    """Running Lipschitz estimate from the pruned candidate set.

    First iteration: maximum gradient-norm mean over all candidates.
    Later iterations: the maximum over candidates with p_x < delta
    (p_x computed at the previous threshold); when the pruned set is
    empty the previous estimate is carried over.
    """
    cands = list(cands)
    if not cands:
        raise ValueError("candidate list is empty")
    if first_iter:
        return max(c.grad_norm_mean for c in cands)
    kept = [c.grad_norm_mean for c in cands if c.p_x < delta]
    return max(kept) if kept else prev_l


def pareto_front(points) -> list[int]:
    """Indices of non-dominated points for bi-objective maximization.

    A point is dominated only when another point is strictly greater in
    both coordinates.  Sort-and-scan: traverse in descending order of the
    first coordinate and keep a point unless a strictly-higher-first-
    coordinate point already exceeded its second coordinate.  Returned
    indices are sorted (stable by original position).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise ValueError("expected (m, 2) array of criterion pairs")
    if not np.all(np.isfinite(pts)):
        raise ValueError("criteria must be finite")
    a, b = pts[:, 0], pts[:, 1]
    order = np.argsort(-a, kind="stable")
    keep: list[int] = []
    best_b_strict = -np.inf  # max b among points with strictly larger a
    i = 0
    m = order.size
    while i < m:
        j = i
        while j < m and a[order[j]] == a[order[i]]:
            j += 1
        group = order[i:j]
        for idx in group:
            if b[idx] >= best_b_strict:
                keep.append(int(idx))
        best_b_strict = max(best_b_strict, float(np.max(b[group])))
        i = j
    return sorted(keep)


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def _candidate_set(state: DesignState, cfg: DesignConfig, rng) -> np.ndarray:
    bounds = state.emulator.x_shift[:, None] + np.stack(
        [np.zeros_like(state.emulator.x_scale), state.emulator.x_scale], axis=1
    )
    if cfg.candidate_refresh == "fixed":
        if state.fixed_candidates is None:
            state.fixed_candidates = maximin_lhs(
                cfg.n_cand, state.x.shape[1], bounds, rng=rng
            )
        return state.fixed_candidates
    return maximin_lhs(cfg.n_cand, state.x.shape[1], bounds, rng=rng)


def _evaluate_with_retries(target, cands, pool, rng, record):
    """Sample from ``pool`` (candidate indices) until an evaluation succeeds."""
    pool = list(pool)
    for _ in range(4):  # initial draw plus up to 3 retries
        if not pool:
            break
        pick = pool.pop(int(rng.integers(len(pool))))
        x_new = cands[pick]
        try:
            y_new = target.evaluate(x_new)
        except DivergenceError as err:
            record["failed"].append({"x": x_new, "error": str(err)})
            continue
        if math.isnan(y_new):
            record["failed"].append({"x": x_new, "error": "NaN output"})
            continue
        return pick, x_new, y_new
    raise DesignStepError("no evaluable point found on the selection set")


def _retrain(state: DesignState, cfg: DesignConfig, x_new, y_new, rng) -> DesignState:
    x = np.vstack([state.x, x_new])
    y = np.append(state.y, y_new)
    bounds = np.stack(
        [state.emulator.x_shift, state.emulator.x_shift + state.emulator.x_scale],
        axis=1,
    )
    refit_cfg = replace(
        cfg.dgp, n_iter=cfg.refit_n_iter, seed=int(rng.integers(2**31))
    )
    emulator = sem_train(
        x, y, refit_cfg, x_bounds=bounds, theta_init=state.emulator.theta_hat
    )
    state.x, state.y, state.emulator = x, y, emulator
    state.iteration += 1
    return state


def gradent_step(state: DesignState, target: Testbed, cfg: DesignConfig, rng) -> DesignState:
    """One GradEnt iteration: score candidates, update L_DGP, pick a
    frontier point, evaluate the target and retrain the emulator."""
    cands = _candidate_set(state, cfg, rng)
    _, var, g_mean, g_cov = dgp_score_batch(state.emulator, cands)
    norms = np.linalg.norm(g_mean, axis=1)
    dists = [
        make_dist(GradientPosterior(mean=g_mean[i], cov=g_cov[i]))
        for i in range(len(cands))
    ]

    first = state.iteration == 0
    if first:
        l_dgp = float(np.max(norms))
    else:
        prev_l = state.l_hist[-1]
        p_prev = np.array([exceedance_prob(d, prev_l) for d in dists])
        kept = norms[p_prev < cfg.delta]
        l_dgp = float(np.max(kept)) if kept.size else prev_l

    p_x = np.array([exceedance_prob(d, l_dgp) for d in dists])
    j_ent = np.array([entropy_criterion(p) for p in p_x])
    frontier = pareto_front(np.column_stack([j_ent, var]))

    record = {
        "iteration": state.iteration + 1,
        "l_dgp": l_dgp,
        "candidates": cands,
        "p_x": p_x,
        "j_ent": j_ent,
        "pred_var": var,
        "grad_norm": norms,
        "frontier": np.asarray(frontier, dtype=int),
        "failed": [],
    }
    pick, x_new, y_new = _evaluate_with_retries(target, cands, frontier, rng, record)
    record.update(chosen_index=pick, x_chosen=x_new, y_chosen=y_new)
    state.l_hist.append(l_dgp)
    state.log.append(record)
    return _retrain(state, cfg, x_new, y_new, rng)


def alm_step(state: DesignState, target: Testbed, cfg: DesignConfig, rng) -> DesignState:
    """One ALM iteration: evaluate at the maximum-variance candidate
    (ties broken by lowest index)."""
    cands = _candidate_set(state, cfg, rng)
    _, var = dgp_predict_batch(state.emulator, cands)
    order = np.argsort(-var, kind="stable")
    record = {
        "iteration": state.iteration + 1,
        "l_dgp": float("nan"),
        "candidates": cands,
        "p_x": np.full(len(cands), np.nan),
        "j_ent": np.full(len(cands), np.nan),
        "pred_var": var,
        "grad_norm": np.full(len(cands), np.nan),
        "frontier": np.empty(0, dtype=int),
        "failed": [],
    }
    pool = list(order)
    pick = None
    for _ in range(4):
        if not pool:
            break
        idx = int(pool.pop(0))  # deterministic argmax with tie-break
        try:
            y_new = target.evaluate(cands[idx])
        except DivergenceError as err:
            record["failed"].append({"x": cands[idx], "error": str(err)})
            continue
        if math.isnan(y_new):
            record["failed"].append({"x": cands[idx], "error": "NaN output"})
            continue
        pick = idx
        break
    if pick is None:
        raise DesignStepError("no evaluable point found on the selection set")
    x_new = cands[pick]
    record.update(chosen_index=pick, x_chosen=x_new, y_chosen=y_new)
    state.l_hist.append(float("nan"))
    state.log.append(record)
    return _retrain(state, cfg, x_new, y_new, rng)


_STEPS = {"gradent": gradent_step, "alm": alm_step}


def run_design(
    target: Testbed,
    cfg: DesignConfig,
    method: str = "gradent",
    checkpoint_stride: int | None = None,
    on_step=None,
) -> DesignTrace:
    """Run a full sequential design from scratch.

    Starts from a maximin LHS of size ``cfg.n0``, performs
    ``cfg.n_total - cfg.n0`` acquisition steps and returns the trace with
    per-iteration acquisition records plus emulator snapshots every
    ``checkpoint_stride`` added points (the final emulator is always
    included).  ``on_step(state)`` is invoked after every step, e.g. for
    live logging.
    """
    if method not in _STEPS:
        raise ValueError(f"unknown design method {method!r}")
    step = _STEPS[method]
    rng = np.random.default_rng(cfg.seed)
    d = target.dim
    x0 = maximin_lhs(cfg.n0, d, target.bounds, rng=rng)
    y0 = target.evaluate_batch(x0)
    if np.any(np.isnan(y0)):
        raise DesignStepError("initial design contains failed evaluations")
    fit_cfg = replace(cfg.dgp, seed=int(rng.integers(2**31)))
    emulator = sem_train(x0, y0, fit_cfg, x_bounds=target.bounds)
    state = DesignState(x=x0, y=y0, emulator=emulator)
    checkpoints = []
    if checkpoint_stride:
        checkpoints.append((state.n, emulator))
    for _ in range(cfg.n_total - cfg.n0):
        state = step(state, target, cfg, rng)
        if on_step is not None:
            on_step(state)
        if checkpoint_stride and (state.n - cfg.n0) % checkpoint_stride == 0:
            checkpoints.append((state.n, state.emulator))
    if not checkpoints or checkpoints[-1][0] != state.n:
        checkpoints.append((state.n, state.emulator))
    return DesignTrace(
        method=method, config=cfg, state=state, checkpoints=tuple(checkpoints)
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

ACQ_LOG_BASE_COLUMNS = ["iteration", "y", "L_DGP", "p_x", "j_ent", "pred_var", "frontier_size", "seed"]


def acq_log_header(d: int) -> list[str]:
    """CSV header for an acquisition log with ``d`` input dimensions."""
    return (
        ["iteration"]
        + [f"x{i + 1}" for i in range(d)]
        + ["y", "L_DGP", "p_x", "j_ent", "pred_var", "frontier_size", "seed"]
    )


def acq_log_row(record: dict, seed: int) -> list:
    """One chosen-point CSV row from a step record."""
    i = record["chosen_index"]
    return (
        [record["iteration"]]
        + [repr(float(v)) for v in record["x_chosen"]]
        + [
            repr(float(record["y_chosen"])),
            repr(float(record["l_dgp"])),
            repr(float(record["p_x"][i])),
            repr(float(record["j_ent"][i])),
            repr(float(record["pred_var"][i])),
            len(record["frontier"]),
            seed,
        ]
    )


def write_acquisition_log(trace: DesignTrace, path):
    """Persist the per-iteration chosen-point log as CSV.

    Columns: iteration, one column per input dimension, y, L_DGP, p_x,
    j_ent, pred_var, frontier_size, seed.
    """
    d = trace.state.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(acq_log_header(d))
        for rec in trace.log:
            writer.writerow(acq_log_row(rec, trace.config.seed))
