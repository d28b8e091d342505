"""Command-line front end.

Subcommands: gen-data, train, predict, evaluate, sweep, bench-mvm.
Flags mirror the experiment-config keys. The exit code is nonzero when
any trial fails.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, kernels, metrics, partition, predictor, trainer
from .experiment import bench_mvm, run_experiment
from .likelihood import CgConfig


def _add_model_flags(p):
    p.add_argument("--kernel", default="matern32", choices=kernels.FAMILIES)
    p.add_argument("--ard", action="store_true",
                   help="independent lengthscale per input dimension")
    p.add_argument("--noise-floor", type=float, default=0.0)


def _add_train_flags(p):
    p.add_argument("--protocol", default="pretrain-finetune",
                   choices=trainer.PROTOCOLS)
    p.add_argument("--adam-steps", type=int, default=100)
    p.add_argument("--adam-lr", type=float, default=0.1)
    p.add_argument("--lbfgs-steps", type=int, default=10)
    p.add_argument("--pretrain-subset", type=int, default=10_000)
    p.add_argument("--pretrain-adam-steps", type=int, default=10)
    p.add_argument("--finetune-steps", type=int, default=3)
    p.add_argument("--cg-tolerance", type=float, default=1.0)
    p.add_argument("--cache-tolerance", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--precond-rank", type=int, default=100)
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--rows-per-partition", type=int, default=0,
                   help="0 selects automatically from the memory budget")
    p.add_argument("--memory-budget-mb", type=int, default=1024)
    p.add_argument("--workers", type=int, default=1)


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        protocol=args.protocol,
        family=args.kernel,
        ard=args.ard,
        noise_floor=args.noise_floor,
        adam=trainer.AdamConfig(lr=args.adam_lr, steps=args.adam_steps),
        lbfgs=trainer.LbfgsConfig(steps=args.lbfgs_steps),
        pretrain_subset=args.pretrain_subset,
        pretrain_adam_steps=args.pretrain_adam_steps,
        finetune_steps=args.finetune_steps,
        cg=CgConfig(tolerance=args.cg_tolerance, max_iters=args.max_iters,
                    probes=args.probes, precond_rank=args.precond_rank),
        rows_per_partition=args.rows_per_partition or None,
        memory_budget_bytes=args.memory_budget_mb * (1 << 20),
        workers=args.workers,
        seed=args.seed,
    )


def cmd_gen_data(args) -> int:
    model = kernels.KernelModel(
        family=args.kernel,
        outputscale=args.outputscale,
        lengthscales=np.array([args.lengthscale]),
        noise=args.noise,
        mean=args.mean,
    )
    rng = np.random.default_rng(args.seed)
    X = rng.uniform(0.0, 1.0, size=(args.n, args.d))
    y = data.sample_prior(model, X, rng)
    data.save_csv(args.out, X, y)
    print(f"wrote {args.n} rows ({args.d} features) to {args.out}")
    return 0


def _load_feature_csv(path) -> np.ndarray:
    """Read a headed CSV in which every column is a feature."""
    import csv as _csv

    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell at line {lineno}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=np.float64)
    if X.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return X


def cmd_train(args) -> int:
    raw = data.load_csv(args.data, args.target)
    dataset = data.split_and_whiten(raw, args.seed, name=Path(args.data).stem)
    config = _train_config(args)
    started = time.perf_counter()
    model, trace = trainer.train(dataset.X_train, dataset.y_train, config)
    train_seconds = time.perf_counter() - started
    cache = predictor.build_cache(model, dataset.X_train, dataset.y_train,
                                  tolerance=args.cache_tolerance,
                                  precond_rank=args.precond_rank)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kernels.save_model(model, out / "model.txt")
    predictor.save_cache(cache, out / "cache.bin")
    with open(out / "trace.csv", "w", encoding="utf-8") as fh:
        for line in trace.csv_rows():
            fh.write(line + "\n")
    print(f"trained in {train_seconds:.1f}s "
          f"({trace.full_evals} full / {trace.subset_evals} subset "
          f"likelihood evaluations); artifacts in {out}")
    return 0


def cmd_predict(args) -> int:
    cache = predictor.load_cache(args.cache)
    if args.target:
        X = data.load_csv(args.inputs, args.target).features
    else:
        X = _load_feature_csv(args.inputs)
    pool = partition.WorkerPool(workers=args.workers)
    out = predictor.predict(cache, X, pool=pool)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mean", "variance", "observed_variance"])
        for m, v, ov in zip(out.mean, out.variance, out.observed_variance):
            writer.writerow([f"{m!r}", f"{v!r}", f"{ov!r}"])
    print(f"wrote {out.mean.shape[0]} predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cache = predictor.load_cache(args.cache)
    raw = data.load_csv(args.data, args.target)
    dataset = data.split_and_whiten(raw, args.seed, name=Path(args.data).stem)
    fitted = predictor.CgPredictor(
        cache, pool=partition.WorkerPool(workers=args.workers))
    result = metrics.evaluate(fitted, dataset, seed=args.seed, method="exact-cg")
    print(f"dataset={result.dataset} rmse={result.rmse:.6f} "
          f"nll={result.nll:.6f} pred_ms_per_1000={result.pred_ms_per_1000:.1f}")
    return 0


def cmd_sweep(args) -> int:
    results = run_experiment(args.config, output_dir=args.out)
    failed = [r for r in results if r.status != "ok"]
    for r in results:
        print(f"{r.dataset} {r.method} seed={r.seed} "
              f"{r.extras.get('sweep_axis', '')}={r.extras.get('sweep_value', '')} "
              f"rmse={r.rmse:.4f} nll={r.nll:.4f} [{r.status}]")
    if failed:
        print(f"{len(failed)} trial(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_bench_mvm(args) -> int:
    rows = bench_mvm(
        n=args.n, d=args.d,
        worker_counts=tuple(int(w) for w in args.workers.split(",")),
        rows_per_partition=args.rows_per_partition or None,
        rhs=args.rhs, repeats=args.repeats, seed=args.seed,
    )
    print("workers,seconds,throughput,speedup,efficiency,partitions")
    for row in rows:
        print(f"{row['workers']},{row['seconds']:.4f},{row['throughput']:.4g},"
              f"{row['speedup']:.3f},{row['efficiency']:.3f},{row['partitions']}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockgp",
        description="Exact GP regression via partitioned kernel products")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="draw a synthetic dataset to CSV")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--kernel", default="rbf", choices=kernels.FAMILIES)
    p.add_argument("--lengthscale", type=float, default=0.2)
    p.add_argument("--outputscale", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--mean", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a CSV and persist the artifacts")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict from a stored cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--inputs", required=True,
                   help="CSV containing the feature columns")
    p.add_argument("--target", default="",
                   help="target column to drop from the inputs CSV")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a stored cache on a dataset")
    p.add_argument("--cache", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-mvm", help="partitioned-MVM worker scaling")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--workers", default="1,2,4")
    p.add_argument("--rows-per-partition", type=int, default=0)
    p.add_argument("--rhs", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_bench_mvm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
