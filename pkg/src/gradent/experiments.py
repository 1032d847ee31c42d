"""Experiment runners: gradient-accuracy benchmark, sequential-design
benchmark with replicates, range-normalized metrics and CSV persistence.

Outputs are plain CSV files plus a JSON run manifest (configuration echo
and a content hash of every emitted CSV); plotting happens downstream.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dgp import DgpConfig, dgp_gradient_batch, dgp_predict_batch, sem_train
from .design import DesignConfig, run_design, write_acquisition_log
from .gp import gp_fit, gp_gradient_batch
from .mathcore import random_lhs
from .testbeds import Testbed, fd_gradient, make_sin_testbed, testbed_by_name

__all__ = [
    "ExperimentConfig",
    "MetricsRow",
    "MetricError",
    "nrmsep",
    "grad_nrmse",
    "make_test_sets",
    "run_gradient_benchmark",
    "run_design_benchmark",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_manifest",
]

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


def nrmsep(pred_means, truth) -> float:
    """Root-mean-square error normalized by the range of the truth."""
    pred = np.asarray(pred_means, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if truth.size < 2 or pred.size != truth.size:
        raise MetricError("need at least two paired values")
    rng = float(np.max(truth) - np.min(truth))
    if rng <= 0.0:
        raise MetricError("truth values are constant; range normalization undefined")
    return float(np.sqrt(np.mean((pred - truth) ** 2)) / rng)


def grad_nrmse(pred_grads, true_grads) -> float:
    """Mean of per-point gradient error norms over true gradient norms.

    Points with a zero true-gradient norm are excluded (count logged).
    """
    pred = np.atleast_2d(np.asarray(pred_grads, dtype=float))
    true = np.atleast_2d(np.asarray(true_grads, dtype=float))
    if pred.shape != true.shape:
        raise MetricError("gradient arrays must have identical shapes")
    norms = np.linalg.norm(true, axis=1)
    keep = norms > 0.0
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        logger.info("grad_nrmse: excluded %d zero-gradient points", dropped)
    if not np.any(keep):
        raise MetricError("all true gradients have zero norm")
    err = np.linalg.norm(pred[keep] - true[keep], axis=1)
    return float(np.mean(err / norms[keep]))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_LOCAL_WIDTHS = {"plateau": 0.15, "lorenz63": 0.05}


@dataclass
class ExperimentConfig:
    """Settings for both benchmark runners; unused fields are ignored.

    The same keys (nested under ``gradient_benchmark`` / ``design_benchmark``
    as needed) are accepted from a YAML config file, with command-line
    flags taking precedence.
    """

    testbed: str = "plateau2d"
    testbed_params: dict = field(default_factory=dict)
    methods: tuple = ("gradent", "alm")
    n0: int = 5
    n_total: int = 100
    n_cand: int = 200
    delta: float = 0.85
    replicates: int = 3
    base_seed: int = 0
    checkpoint_stride: int = 5
    out_dir: str = "results"
    n_test_global: int = 400
    n_test_local: int = 200
    local_width: float | None = None  # defaults per testbed family
    # DGP training
    sem_iterations: int = 500
    refit_iterations: int = 100
    n_imp: int = 10
    # gradient benchmark
    dims: tuple = (1, 2)
    train_sizes: tuple = (50, 100)
    n_test_grad: int = 400
    fd_step: float = 1e-6

    def resolve_local_width(self) -> float:
        if self.local_width is not None:
            return self.local_width
        for prefix, width in _LOCAL_WIDTHS.items():
            if self.testbed.startswith(prefix):
                return width
        return 0.1

    def dgp_config(self, seed: int) -> DgpConfig:
        return DgpConfig(n_iter=self.sem_iterations, n_imp=self.n_imp, seed=seed)

    def design_config(self, seed: int) -> DesignConfig:
        return DesignConfig(
            n0=self.n0,
            n_total=self.n_total,
            n_cand=self.n_cand,
            delta=self.delta,
            seed=seed,
            dgp=self.dgp_config(seed),
            refit_n_iter=self.refit_iterations,
        )

    @classmethod
    def from_yaml(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if overrides:
            raw.update({k: v for k, v in overrides.items() if v is not None})
        for key in ("methods", "dims", "train_sizes"):
            if key in raw and raw[key] is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("methods", "dims", "train_sizes"):
            out[key] = list(out[key])
        return out


@dataclass(frozen=True)
class MetricsRow:
    method: str
    replicate: int
    checkpoint: int
    global_nrmsep: float
    local_nrmsep: float
    wall_time: float


# ---------------------------------------------------------------------------
# test sets
# ---------------------------------------------------------------------------


def _lhs_in_domain(n, target: Testbed, rng) -> np.ndarray:
    pts = random_lhs(n, target.dim, rng)
    lo, hi = target.bounds[:, 0], target.bounds[:, 1]
    return lo + pts * (hi - lo)


def _drop_collisions(X, X_ref, target, rng, tol=1e-9):
    """Redraw any test point closer than ``tol`` to a reference point."""
    if X_ref is None or len(X_ref) == 0:
        return X
    for i, row in enumerate(X):
        while np.min(np.linalg.norm(X_ref - row, axis=1)) < tol:
            row = _lhs_in_domain(2, target, rng)[0]
        X[i] = row
    return X


def make_test_sets(
    target: Testbed,
    n_global: int,
    n_local: int,
    local_width: float,
    seed: int,
    x_train=None,
):
    """Global LHS test set plus a local one inside the sharp region.

    The local set is rejection-sampled from LHS batches using the
    testbed's distance-to-transition function; both sets are redrawn away
    from training points closer than 1e-9.
    """
    rng = np.random.default_rng(seed)
    x_global = _drop_collisions(
        _lhs_in_domain(n_global, target, rng), x_train, target, rng
    )
    x_local = None
    if n_local > 0 and target.region_distance is not None:
        rows = []
        while sum(len(r) for r in rows) < n_local:
            batch = _lhs_in_domain(max(4 * n_local, 64), target, rng)
            dist = np.array([target.region_distance(row) for row in batch])
            rows.append(batch[dist <= local_width])
        x_local = np.vstack(rows)[:n_local]
        x_local = _drop_collisions(x_local, x_train, target, rng)
    y_global = target.evaluate_batch(x_global)
    y_local = target.evaluate_batch(x_local) if x_local is not None else None
    return x_global, y_global, x_local, y_local


# ---------------------------------------------------------------------------
# gradient benchmark
# ---------------------------------------------------------------------------

GRAD_BENCH_COLUMNS = ["dim", "n_train", "method", "replicate", "nrmse", "wall_time"]


def run_gradient_benchmark(cfg: ExperimentConfig, sin_factory=None) -> list[dict]:
    """Gradient-accuracy comparison on the sine test function.

    For every (dimension, training size, replicate) trains one GP and one
    DGP on an LHS design, then scores three gradient estimators at
    ``cfg.n_test_grad`` LHS test points against the analytic truth: the GP
    gradient posterior mean, the DGP gradient posterior mean and central
    finite differences of the DGP predictive mean.
    """
    factory = sin_factory or make_sin_testbed
    rows = []
    for d in cfg.dims:
        target = factory(d)
        for n_train in cfg.train_sizes:
            for rep in range(cfg.replicates):
                seed = cfg.base_seed + rep
                rng = np.random.default_rng(seed)
                x_train = _lhs_in_domain(n_train, target, rng)
                y_train = target.evaluate_batch(x_train)
                x_test = _drop_collisions(
                    _lhs_in_domain(cfg.n_test_grad, target, rng), x_train, target, rng
                )
                true_grads = np.array([target.grad(row) for row in x_test])

                t0 = time.perf_counter()
                gp_model = gp_fit(
                    x_train, y_train, fixed_nugget=1e-6, seed=seed,
                    x_bounds=target.bounds,
                )
                gp_grads, _ = gp_gradient_batch(gp_model, x_test)
                rows.append(
                    dict(dim=d, n_train=n_train, method="gp-grad", replicate=rep,
                         nrmse=grad_nrmse(gp_grads, true_grads),
                         wall_time=time.perf_counter() - t0)
                )

                t0 = time.perf_counter()
                dgp_model = sem_train(
                    x_train, y_train, cfg.dgp_config(seed), x_bounds=target.bounds
                )
                dgp_grads, _ = dgp_gradient_batch(dgp_model, x_test)
                t_dgp = time.perf_counter() - t0
                rows.append(
                    dict(dim=d, n_train=n_train, method="dgp-grad", replicate=rep,
                         nrmse=grad_nrmse(dgp_grads, true_grads), wall_time=t_dgp)
                )

                t0 = time.perf_counter()
                mean_f = lambda x: float(dgp_predict_batch(dgp_model, x[None, :])[0][0])
                fd_grads = np.array(
                    [fd_gradient(mean_f, row, cfg.fd_step, target.bounds).gradient
                     for row in x_test]
                )
                rows.append(
                    dict(dim=d, n_train=n_train, method="dgp-fd", replicate=rep,
                         nrmse=grad_nrmse(fd_grads, true_grads),
                         wall_time=t_dgp + time.perf_counter() - t0)
                )
    return rows


# ---------------------------------------------------------------------------
# design benchmark
# ---------------------------------------------------------------------------

DESIGN_BENCH_COLUMNS = [
    "method", "replicate", "checkpoint", "global_nrmsep", "local_nrmsep", "wall_time",
]


def run_design_benchmark(cfg: ExperimentConfig, out_dir=None) -> list[MetricsRow]:
    """Sequential-design comparison with replicates.

    Runs every configured method with seeds ``base_seed + replicate``,
    evaluates global and local NRMSEP at each emulator checkpoint against
    held-out LHS test sets, and (when ``out_dir`` is given) persists one
    acquisition log per run.  A failed replicate is logged and skipped.
    """
    target = testbed_by_name(cfg.testbed, **cfg.testbed_params)
    rows: list[MetricsRow] = []
    width = cfg.resolve_local_width()
    for rep in range(cfg.replicates):
        seed = cfg.base_seed + rep
        x_global, y_global, x_local, y_local = make_test_sets(
            target, cfg.n_test_global, cfg.n_test_local, width, seed=10_000 + seed
        )
        for method in cfg.methods:
            try:
                t0 = time.perf_counter()
                trace = run_design(
                    target,
                    cfg.design_config(seed),
                    method=method,
                    checkpoint_stride=cfg.checkpoint_stride,
                )
                elapsed = time.perf_counter() - t0
            except Exception:
                logger.exception(
                    "replicate %d of method %s failed; skipping", rep, method
                )
                continue
            for n_design, model in trace.checkpoints:
                g_pred, _ = dgp_predict_batch(model, x_global)
                metrics = dict(global_nrmsep=nrmsep(g_pred, y_global))
                if x_local is not None:
                    l_pred, _ = dgp_predict_batch(model, x_local)
                    metrics["local_nrmsep"] = nrmsep(l_pred, y_local)
                else:
                    metrics["local_nrmsep"] = float("nan")
                rows.append(
                    MetricsRow(
                        method=method,
                        replicate=rep,
                        checkpoint=n_design,
                        wall_time=elapsed,
                        **metrics,
                    )
                )
            if out_dir is not None:
                out = Path(out_dir)
                out.mkdir(parents=True, exist_ok=True)
                write_acquisition_log(
                    trace, out / f"acquisition_{method}_rep{rep}.csv"
                )
    return rows


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows, columns, path):
    """Write dict-or-dataclass rows with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for row in rows:
        if dataclasses.is_dataclass(row):
            row = dataclasses.asdict(row)
        lines.append(",".join(_format_cell(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[dict]:
    """Read back a metrics CSV, parsing numeric cells."""
    lines = Path(path).read_text().strip().split("\n")
    columns = lines[0].split(",")
    out = []
    for line in lines[1:]:
        row = {}
        for key, cell in zip(columns, line.split(",")):
            try:
                row[key] = int(cell)
            except ValueError:
                try:
                    row[key] = float(cell)
                except ValueError:
                    row[key] = cell
        out.append(row)
    return out


def write_manifest(cfg: ExperimentConfig, csv_paths, path):
    """JSON manifest: configuration echo plus a SHA-256 per CSV artifact."""
    hashes = {}
    for p in csv_paths:
        p = Path(p)
        hashes[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"config": cfg.to_dict(), "artifacts": hashes}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
