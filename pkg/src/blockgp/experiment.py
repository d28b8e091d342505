"""Experiment driver: configs, trial matrices, sweeps, and CSV artifacts.

Configs are plain-text key = value files with section headers (INI).
Every protocol constant is a named key whose default is the benchmark
value: the 4/9-2/9-3/9 split is fixed in the data module, Adam runs at
learning rate 0.1, preconditioners are rank 100, training CG tolerance is
1.0 with cache tolerance 1e-3, the pretraining subset is 10,000 points,
SGPR uses 512 inducing points, and three seeds are averaged.
"""

from __future__ import annotations

import configparser
import csv
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, data, kernels, metrics, partition, predictor, trainer
from .likelihood import CgConfig

METHODS = ("exact-cg", "exact-cholesky", "sgpr")

RESULT_COLUMNS = [
    "dataset", "method", "seed", "sweep_axis", "sweep_value",
    "rmse", "nll", "train_seconds", "pred_ms_per_1000",
    "status", "error", "diagnostics",
]


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    methods: tuple = ("exact-cg",)
    seeds: tuple = (0, 1, 2)
    output_dir: str = "results"
    # data
    source: str = "synthetic"
    path: str = ""
    target_column: str = "target"
    n: int = 2000
    d: int = 2
    gen_kernel: str = "rbf"
    gen_lengthscale: float = 0.2
    gen_outputscale: float = 1.0
    gen_noise: float = 0.05
    gen_mean: float = 0.0
    # model + training
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    cache_tolerance: float = predictor.DEFAULT_CACHE_TOLERANCE
    variance_tolerance: float = predictor.DEFAULT_VARIANCE_TOLERANCE
    # sgpr
    sgpr: baselines.SgprConfig = field(default_factory=baselines.SgprConfig)
    # sweep
    sweep_axis: str = "none"
    subsample_fractions: tuple = (0.125, 0.25, 0.5, 1.0)
    inducing_counts: tuple = (8, 64, 512)
    worker_counts: tuple = (1, 2, 4)


def _parse_list(raw, cast):
    return tuple(cast(part.strip()) for part in raw.split(",") if part.strip())


def read_config(path) -> ExperimentConfig:
    """Parse an INI experiment file; unknown keys are rejected."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = ExperimentConfig()

    known = {
        "experiment": {"name", "methods", "seeds", "output_dir"},
        "data": {"source", "path", "target_column", "n", "d", "kernel",
                 "lengthscale", "outputscale", "noise", "mean"},
        "model": {"kernel", "ard", "noise_floor"},
        "train": {"protocol", "adam_steps", "adam_lr", "lbfgs_steps",
                  "lbfgs_history", "pretrain_subset", "pretrain_adam_steps",
                  "finetune_steps", "cg_tolerance", "cache_tolerance",
                  "variance_tolerance", "max_iters", "precond_rank", "probes",
                  "rows_per_partition", "memory_budget_mb", "workers"},
        "sgpr": {"inducing", "adam_steps", "adam_lr", "jitter"},
        "sweep": {"axis", "subsample_fractions", "inducing_counts",
                  "worker_counts"},
    }
    for section in parser.sections():
        if section not in known:
            raise ValueError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in known[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")

    if parser.has_section("experiment"):
        sec = parser["experiment"]
        cfg.name = sec.get("name", cfg.name)
        if "methods" in sec:
            cfg.methods = _parse_list(sec["methods"], str)
            for m in cfg.methods:
                if m not in METHODS:
                    raise ValueError(f"unknown method {m!r}")
        if "seeds" in sec:
            cfg.seeds = _parse_list(sec["seeds"], int)
        cfg.output_dir = sec.get("output_dir", cfg.output_dir)

    if parser.has_section("data"):
        sec = parser["data"]
        cfg.source = sec.get("source", cfg.source)
        cfg.path = sec.get("path", cfg.path)
        cfg.target_column = sec.get("target_column", cfg.target_column)
        cfg.n = sec.getint("n", cfg.n)
        cfg.d = sec.getint("d", cfg.d)
        cfg.gen_kernel = sec.get("kernel", cfg.gen_kernel)
        cfg.gen_lengthscale = sec.getfloat("lengthscale", cfg.gen_lengthscale)
        cfg.gen_outputscale = sec.getfloat("outputscale", cfg.gen_outputscale)
        cfg.gen_noise = sec.getfloat("noise", cfg.gen_noise)
        cfg.gen_mean = sec.getfloat("mean", cfg.gen_mean)

    tc = cfg.train
    if parser.has_section("model"):
        sec = parser["model"]
        tc.family = sec.get("kernel", tc.family)
        tc.ard = sec.getboolean("ard", tc.ard)
        tc.noise_floor = sec.getfloat("noise_floor", tc.noise_floor)
    if parser.has_section("train"):
        sec = parser["train"]
        tc.protocol = sec.get("protocol", tc.protocol)
        tc.adam = replace(tc.adam,
                          steps=sec.getint("adam_steps", tc.adam.steps),
                          lr=sec.getfloat("adam_lr", tc.adam.lr))
        tc.lbfgs = replace(tc.lbfgs,
                           steps=sec.getint("lbfgs_steps", tc.lbfgs.steps),
                           history=sec.getint("lbfgs_history", tc.lbfgs.history))
        tc.pretrain_subset = sec.getint("pretrain_subset", tc.pretrain_subset)
        tc.pretrain_adam_steps = sec.getint("pretrain_adam_steps",
                                            tc.pretrain_adam_steps)
        tc.finetune_steps = sec.getint("finetune_steps", tc.finetune_steps)
        tc.cg = CgConfig(
            tolerance=sec.getfloat("cg_tolerance", tc.cg.tolerance),
            max_iters=sec.getint("max_iters", tc.cg.max_iters),
            probes=sec.getint("probes", tc.cg.probes),
            precond_rank=sec.getint("precond_rank", tc.cg.precond_rank),
        )
        cfg.cache_tolerance = sec.getfloat("cache_tolerance", cfg.cache_tolerance)
        cfg.variance_tolerance = sec.getfloat("variance_tolerance",
                                              cfg.variance_tolerance)
        rpp = sec.getint("rows_per_partition", 0)
        tc.rows_per_partition = rpp if rpp > 0 else None
        tc.memory_budget_bytes = sec.getint("memory_budget_mb", 1024) * (1 << 20)
        tc.workers = sec.getint("workers", tc.workers)
    if parser.has_section("sgpr"):
        sec = parser["sgpr"]
        cfg.sgpr = baselines.SgprConfig(
            inducing=sec.getint("inducing", cfg.sgpr.inducing),
            adam_steps=sec.getint("adam_steps", cfg.sgpr.adam_steps),
            adam_lr=sec.getfloat("adam_lr", cfg.sgpr.adam_lr),
            jitter=sec.getfloat("jitter", cfg.sgpr.jitter),
        )
    if parser.has_section("sweep"):
        sec = parser["sweep"]
        cfg.sweep_axis = sec.get("axis", cfg.sweep_axis)
        if cfg.sweep_axis not in ("none", "subsample", "inducing", "workers"):
            raise ValueError(f"unknown sweep axis {cfg.sweep_axis!r}")
        if "subsample_fractions" in sec:
            cfg.subsample_fractions = _parse_list(sec["subsample_fractions"], float)
        if "inducing_counts" in sec:
            cfg.inducing_counts = _parse_list(sec["inducing_counts"], int)
        if "worker_counts" in sec:
            cfg.worker_counts = _parse_list(sec["worker_counts"], int)
    return cfg


def load_dataset(cfg: ExperimentConfig, seed: int) -> data.Dataset:
    if cfg.source == "csv":
        raw = data.load_csv(cfg.path, cfg.target_column)
        return data.split_and_whiten(raw, seed, name=cfg.name)
    if cfg.source == "synthetic":
        gen = kernels.KernelModel(
            family=cfg.gen_kernel,
            outputscale=cfg.gen_outputscale,
            lengthscales=np.array([cfg.gen_lengthscale]),
            noise=cfg.gen_noise,
            mean=cfg.gen_mean,
        )
        return data.gen_synthetic(cfg.n, cfg.d, gen, seed, name=cfg.name)
    raise ValueError(f"unknown data source {cfg.source!r}")


# ---------------------------------------------------------------------------
# Fitting one (method, dataset, seed) cell.
# ---------------------------------------------------------------------------

def fit_exact_cg(dataset: data.Dataset, cfg: ExperimentConfig, seed: int):
    tc = replace(cfg.train, seed=seed)
    started = time.perf_counter()
    model, trace = trainer.train(dataset.X_train, dataset.y_train, tc)
    train_seconds = time.perf_counter() - started
    precompute_started = time.perf_counter()
    cache = predictor.build_cache(
        model, dataset.X_train, dataset.y_train,
        tolerance=cfg.cache_tolerance,
        precond_rank=tc.cg.precond_rank,
    )
    precompute_seconds = time.perf_counter() - precompute_started
    pool = partition.WorkerPool(workers=tc.workers)
    fitted = predictor.CgPredictor(cache, pool=pool,
                                   variance_tolerance=cfg.variance_tolerance,
                                   precond_rank=tc.cg.precond_rank)
    extras = {
        "full_mll_evals": trace.full_evals,
        "subset_mll_evals": trace.subset_evals,
        "precompute_seconds": round(precompute_seconds, 4),
        "cache_iterations": cache.diagnostics.get("iterations"),
        "workers": tc.workers,
    }
    return fitted, model, trace, train_seconds, extras


def fit_exact_cholesky(dataset: data.Dataset, cfg: ExperimentConfig, seed: int):
    """Hyperparameters from the iterative trainer, inference by dense
    factorization; the harness's direct-solve reference."""
    tc = replace(cfg.train, seed=seed)
    started = time.perf_counter()
    model, trace = trainer.train(dataset.X_train, dataset.y_train, tc)
    fitted = baselines.CholeskyModel.fit(model, dataset.X_train, dataset.y_train)
    train_seconds = time.perf_counter() - started
    extras = {"mll": round(fitted.mll, 6)}
    return fitted, model, trace, train_seconds, extras


def fit_sgpr(dataset: data.Dataset, cfg: ExperimentConfig, seed: int,
             inducing: int | None = None):
    sc = replace(cfg.sgpr, seed=seed,
                 inducing=inducing if inducing is not None else cfg.sgpr.inducing)
    started = time.perf_counter()
    fitted = baselines.sgpr_fit(dataset.X_train, dataset.y_train, sc,
                                family=cfg.train.family, ard=cfg.train.ard,
                                noise_floor=cfg.train.noise_floor)
    train_seconds = time.perf_counter() - started
    extras = {"inducing": fitted.m, "bound": round(fitted.bound, 6)}
    return fitted, fitted.model, None, train_seconds, extras


def _run_cell(dataset, cfg, method, seed, sweep_axis="", sweep_value="",
              inducing=None, workers=None):
    local_cfg = cfg
    if workers is not None:
        local_cfg = replace(cfg, train=replace(cfg.train, workers=workers))
    try:
        if method == "exact-cg":
            fitted, _, _, train_seconds, extras = fit_exact_cg(dataset, local_cfg, seed)
        elif method == "exact-cholesky":
            fitted, _, _, train_seconds, extras = fit_exact_cholesky(dataset, local_cfg, seed)
        elif method == "sgpr":
            fitted, _, _, train_seconds, extras = fit_sgpr(dataset, local_cfg, seed,
                                                           inducing=inducing)
        else:
            raise ValueError(f"unknown method {method!r}")
        result = metrics.evaluate(fitted, dataset, seed=seed, method=method,
                                  train_seconds=train_seconds, extras=extras)
    except Exception as exc:  # record the failure, keep the run going
        result = metrics.ExperimentResult(
            dataset=dataset.name, method=method, seed=seed,
            rmse=float("nan"), nll=float("nan"),
            train_seconds=float("nan"), pred_ms_per_1000=float("nan"),
            status="failed", error=f"{type(exc).__name__}: {exc}")
    result.extras["sweep_axis"] = sweep_axis
    result.extras["sweep_value"] = sweep_value
    return result


def run_experiment(config, output_dir=None) -> list[metrics.ExperimentResult]:
    """Execute the trials-by-seeds matrix and write CSV artifacts.

    Returns every per-trial result; failures are recorded as rows with
    status=failed rather than aborting the run.
    """
    cfg = read_config(config) if not isinstance(config, ExperimentConfig) else config
    out_dir = Path(output_dir if output_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for seed in cfg.seeds:
        dataset = load_dataset(cfg, seed)
        if cfg.sweep_axis == "subsample":
            for fraction in cfg.subsample_fractions:
                sub = dataset.subsample_train(fraction, seed) if fraction < 1 else dataset
                for method in cfg.methods:
                    results.append(_run_cell(sub, cfg, method, seed,
                                             "subsample", f"{fraction:g}"))
        elif cfg.sweep_axis == "inducing":
            for method in cfg.methods:
                if method == "sgpr":
                    for m in cfg.inducing_counts:
                        results.append(_run_cell(dataset, cfg, method, seed,
                                                 "inducing", str(m), inducing=m))
                else:
                    results.append(_run_cell(dataset, cfg, method, seed))
        elif cfg.sweep_axis == "workers":
            for method in cfg.methods:
                if method == "exact-cg":
                    for w in cfg.worker_counts:
                        results.append(_run_cell(dataset, cfg, method, seed,
                                                 "workers", str(w), workers=w))
                else:
                    results.append(_run_cell(dataset, cfg, method, seed))
        else:
            for method in cfg.methods:
                results.append(_run_cell(dataset, cfg, method, seed))

    write_results_csv(out_dir / "results.csv", results)
    write_summary_csv(out_dir / "summary.csv", results)
    return results


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_results_csv(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in results:
            diag = ";".join(
                f"{k}={_fmt(v)}" for k, v in sorted(r.extras.items())
                if k not in ("sweep_axis", "sweep_value", "precompute_seconds"))
            writer.writerow([
                r.dataset, r.method, r.seed,
                r.extras.get("sweep_axis", ""), r.extras.get("sweep_value", ""),
                _fmt(r.rmse), _fmt(r.nll),
                _fmt(r.train_seconds), _fmt(r.pred_ms_per_1000),
                r.status, r.error, diag,
            ])


def write_summary_csv(path, results) -> None:
    """Mean and standard deviation over seeds for each trial group."""
    groups: dict[tuple, list[metrics.ExperimentResult]] = {}
    for r in results:
        if r.status != "ok":
            continue
        key = (r.method, r.extras.get("sweep_axis", ""),
               r.extras.get("sweep_value", ""))
        groups.setdefault(key, []).append(r)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "sweep_axis", "sweep_value", "trials",
                         "rmse_mean", "rmse_std", "nll_mean", "nll_std",
                         "train_seconds_mean"])
        for key in sorted(groups):
            rs = groups[key]
            rmses = [r.rmse for r in rs]
            nlls = [r.nll for r in rs]
            writer.writerow([
                key[0], key[1], key[2], len(rs),
                _fmt(statistics.fmean(rmses)),
                _fmt(statistics.stdev(rmses) if len(rmses) > 1 else 0.0),
                _fmt(statistics.fmean(nlls)),
                _fmt(statistics.stdev(nlls) if len(nlls) > 1 else 0.0),
                _fmt(statistics.fmean(r.train_seconds for r in rs)),
            ])


# ---------------------------------------------------------------------------
# MVM throughput benchmark.
# ---------------------------------------------------------------------------

def bench_mvm(n: int, d: int = 8, worker_counts=(1, 2, 4),
              rows_per_partition: int | None = None, rhs: int = 8,
              repeats: int = 3, seed: int = 0, family: str = "rbf") -> list[dict]:
    """Measure partitioned-MVM throughput against the worker count.

    BLAS pools are pinned to one thread for every measurement so the
    worker count is the only source of parallelism; throughput is kernel
    entries per second (n^2 / median seconds), reported with speedup and
    efficiency relative to one worker.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    V = rng.standard_normal((n, rhs))
    model = kernels.KernelModel(family=family, outputscale=1.0,
                                lengthscales=np.array([1.0]), noise=0.1)
    plan = (partition.plan_partitions(n, rows_per_partition)
            if rows_per_partition else partition.plan_from_budget(n))
    oracle = kernels.training_mvm_oracle(model)
    rows = []
    base = None
    with threadpool_limits(limits=1):
        for w in worker_counts:
            pool = partition.WorkerPool(workers=w,
                                        scratch_entries=plan.block_entries)
            times = []
            partition.partitioned_mvm(oracle, X, V, plan, pool)  # warmup
            for _ in range(repeats):
                started = time.perf_counter()
                partition.partitioned_mvm(oracle, X, V, plan, pool)
                times.append(time.perf_counter() - started)
            seconds = statistics.median(times)
            throughput = n * n / seconds
            if base is None:
                base = throughput
            rows.append({
                "workers": w,
                "seconds": seconds,
                "throughput": throughput,
                "speedup": throughput / base,
                "efficiency": throughput / base / w,
                "partitions": plan.num_partitions,
            })
    return rows
