"""Command-line entry points.

Subcommands:
    fit          train an emulator from a CSV data file and serialize it
    predict      evaluate a serialized emulator at points from a CSV file
    grad-bench   run the gradient-accuracy benchmark
    design-bench run the sequential-design benchmark with replicates
    design-run   run a single sequential design with a live CSV log

Data files are CSV with a header row: one column per input dimension
(``x1..xd``) plus ``y``.  Experiment settings come from a YAML config file
(see ``ExperimentConfig``); any flag given on the command line overrides
the corresponding config key.  The thread count and output directory are
controlled by flags only.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradent", description=__doc__)
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap BLAS/OpenMP thread count (set before numpy loads)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="train and serialize an emulator")
    p_fit.add_argument("--data", required=True, help="training CSV (x1..xd, y)")
    p_fit.add_argument("--out", required=True, help="output model file (.npz)")
    p_fit.add_argument("--emulator", choices=["dgp", "gp"], default="dgp")
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--sem-iterations", type=int, default=500)
    p_fit.add_argument("--n-imp", type=int, default=10)

    p_pred = sub.add_parser("predict", help="predict mean/variance/gradients")
    p_pred.add_argument("--model", required=True, help="serialized model (.npz)")
    p_pred.add_argument("--points", required=True, help="points CSV (x1..xd)")
    p_pred.add_argument("--out", required=True, help="output CSV")

    for name in ("grad-bench", "design-bench"):
        p = sub.add_parser(name, help=f"run the {name.replace('-', ' ')}")
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--replicates", type=int, default=None)
        p.add_argument("--base-seed", type=int, default=None)
        p.add_argument("--testbed", default=None)
        p.add_argument("--n0", type=int, default=None)
        p.add_argument("--n-total", type=int, default=None, dest="n_total")
        p.add_argument("--n-cand", type=int, default=None, dest="n_cand")
        p.add_argument("--sem-iterations", type=int, default=None)
        p.add_argument("--checkpoint-stride", type=int, default=None)

    p_run = sub.add_parser("design-run", help="single design run with live log")
    p_run.add_argument("--testbed", default="plateau2d")
    p_run.add_argument("--method", choices=["gradent", "alm"], default="gradent")
    p_run.add_argument("--n0", type=int, default=5)
    p_run.add_argument("--n-total", type=int, default=100, dest="n_total")
    p_run.add_argument("--n-cand", type=int, default=200, dest="n_cand")
    p_run.add_argument("--delta", type=float, default=0.85)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--sem-iterations", type=int, default=500)
    p_run.add_argument("--refit-iterations", type=int, default=100)
    p_run.add_argument("--out-dir", default="results")
    return parser


def _read_xy_csv(path, with_y=True):
    import numpy as np

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(c) for c in row] for row in reader if row]
    data = np.asarray(rows, dtype=float)
    cols = [h.strip() for h in header]
    if with_y:
        if "y" not in cols:
            raise SystemExit(f"{path}: expected a 'y' column")
        y_idx = cols.index("y")
        x_idx = [i for i in range(len(cols)) if i != y_idx]
        return data[:, x_idx], data[:, y_idx]
    return data, None


def _cmd_fit(args):
    from .dgp import DgpConfig, save_dgp, sem_train
    from .gp import gp_fit

    x, y = _read_xy_csv(args.data)
    if args.emulator == "dgp":
        cfg = DgpConfig(n_iter=args.sem_iterations, n_imp=args.n_imp, seed=args.seed)
        model = sem_train(x, y, cfg)
        save_dgp(model, args.out)
    else:
        import numpy as np

        model = gp_fit(x, y, seed=args.seed)
        np.savez(
            args.out,
            kind="gp",
            x_train=model.x_train,
            y_train=model.y_train,
            lengthscales=model.params.lengthscales,
            signal_variance=model.params.signal_variance,
            nugget=model.params.nugget,
            x_shift=model.x_shift,
            x_scale=model.x_scale,
            y_shift=model.y_shift,
            y_scale=model.y_scale,
        )
    print(f"wrote {args.out}")
    return 0


def _load_any_model(path):
    import numpy as np

    from .dgp import dgp_gradient_batch, dgp_predict_batch, load_dgp
    from .gp import gp_condition, gp_gradient_batch, gp_predict_batch
    from .mathcore import KernelParams

    with np.load(path) as z:
        is_gp = "kind" in z.files and str(z["kind"]) == "gp"
        if is_gp:
            params = KernelParams(
                z["lengthscales"], float(z["signal_variance"]), float(z["nugget"])
            )
            x, y = z["x_train"], z["y_train"]
            shift, scale = z["x_shift"], z["x_scale"]
    if is_gp:
        model = gp_condition(
            x, y, params, x_bounds=np.stack([shift, shift + scale], axis=1),
            scale_inputs=True, standardize_output=True,
        )
        return model, gp_predict_batch, gp_gradient_batch
    model = load_dgp(path)
    return model, dgp_predict_batch, dgp_gradient_batch


def _cmd_predict(args):
    x, _ = _read_xy_csv(args.points, with_y=False)
    model, predict_batch, gradient_batch = _load_any_model(args.model)
    mean, var = predict_batch(model, x)
    g_mean, _ = gradient_batch(model, x)
    d = x.shape[1]
    header = (
        [f"x{i + 1}" for i in range(d)]
        + ["mean", "variance"]
        + [f"grad{i + 1}" for i in range(d)]
    )
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(x.shape[0]):
            writer.writerow(
                [repr(float(v)) for v in x[i]]
                + [repr(float(mean[i])), repr(float(var[i]))]
                + [repr(float(v)) for v in g_mean[i]]
            )
    print(f"wrote {args.out}")
    return 0


def _experiment_config(args):
    from .experiments import ExperimentConfig

    overrides = {
        k: getattr(args, k, None)
        for k in (
            "out_dir",
            "replicates",
            "base_seed",
            "testbed",
            "n0",
            "n_total",
            "n_cand",
            "sem_iterations",
            "checkpoint_stride",
        )
    }
    if args.config:
        return ExperimentConfig.from_yaml(args.config, overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _cmd_grad_bench(args):
    from .experiments import (
        GRAD_BENCH_COLUMNS,
        run_gradient_benchmark,
        write_manifest,
        write_metrics_csv,
    )

    cfg = _experiment_config(args)
    rows = run_gradient_benchmark(cfg)
    out = Path(cfg.out_dir)
    csv_path = out / "gradient_benchmark.csv"
    write_metrics_csv(rows, GRAD_BENCH_COLUMNS, csv_path)
    write_manifest(cfg, [csv_path], out / "manifest.json")
    print(f"wrote {csv_path}")
    return 0


def _cmd_design_bench(args):
    from .experiments import (
        DESIGN_BENCH_COLUMNS,
        run_design_benchmark,
        write_manifest,
        write_metrics_csv,
    )

    cfg = _experiment_config(args)
    rows = run_design_benchmark(cfg, out_dir=cfg.out_dir)
    out = Path(cfg.out_dir)
    csv_path = out / "design_benchmark.csv"
    write_metrics_csv(rows, DESIGN_BENCH_COLUMNS, csv_path)
    write_manifest(cfg, [csv_path], out / "manifest.json")
    print(f"wrote {csv_path}")
    return 0


def _cmd_design_run(args):
    from .design import DesignConfig, acq_log_header, acq_log_row, run_design
    from .dgp import DgpConfig
    from .testbeds import testbed_by_name

    target = testbed_by_name(args.testbed)
    cfg = DesignConfig(
        n0=args.n0,
        n_total=args.n_total,
        n_cand=args.n_cand,
        delta=args.delta,
        seed=args.seed,
        dgp=DgpConfig(n_iter=args.sem_iterations, seed=args.seed),
        refit_n_iter=args.refit_iterations,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / f"design_{args.method}_seed{args.seed}.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(acq_log_header(target.dim))
        fh.flush()

        def on_step(state):
            writer.writerow(acq_log_row(state.log[-1], args.seed))
            fh.flush()

        run_design(target, cfg, method=args.method, on_step=on_step)
    print(f"wrote {log_path}")
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "grad-bench": _cmd_grad_bench,
    "design-bench": _cmd_design_bench,
    "design-run": _cmd_design_run,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        # must happen before numpy initializes its thread pools
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
