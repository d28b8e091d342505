"""Hyperparameter optimization: Adam, L-BFGS, and the two training protocols.

Optimizers work on the unconstrained parameter vector; constrained values
stay feasible by construction of the softplus transforms. Objectives are
minimized, so the likelihood objective returns the negative MLL.

The subset protocol pretrains on a uniformly sampled subset (10 L-BFGS
steps, then 10 Adam steps at learning rate 0.1) and fine-tunes with 3 Adam
steps on the full data; the alternative runs Adam on the full data from
scratch, conventionally for 100 steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import TrainingError, NumericError
from .kernels import KernelModel
from .likelihood import CgConfig, mll_value_and_grad
from .partition import (DEFAULT_BUDGET_BYTES, WorkerPool, plan_from_budget,
                        plan_partitions)

PROTOCOLS = ("pretrain-finetune", "full-adam")


@dataclass
class AdamConfig:
    lr: float = 0.1
    steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("step count must be non-negative")


@dataclass
class LbfgsConfig:
    steps: int = 10
    history: int = 10
    armijo_c1: float = 1e-4
    max_backtracks: int = 30


@dataclass
class TrainConfig:
    """Knobs for one training run; defaults follow the benchmark protocol."""

    protocol: str = "pretrain-finetune"
    family: str = "matern32"
    ard: bool = False
    noise_floor: float = 0.0
    adam: AdamConfig = field(default_factory=AdamConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    pretrain_subset: int = 10_000
    pretrain_adam_steps: int = 10
    finetune_steps: int = 3
    cg: CgConfig = field(default_factory=CgConfig)
    rows_per_partition: int | None = None
    memory_budget_bytes: int = DEFAULT_BUDGET_BYTES
    workers: int = 1
    seed: int = 0
    fresh_probes: bool = True

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "pretrain-finetune" and self.pretrain_subset < 1:
            raise ValueError("pretrain_subset must be >= 1")


@dataclass
class StepRecord:
    phase: str
    step: int
    objective_value: float
    grad_norm: float
    seconds: float
    cg_iterations: int

    @property
    def mll(self) -> float:
        """Objectives are negative MLLs; expose the MLL for reporting."""
        return -self.objective_value


@dataclass
class TrainTrace:
    records: list[StepRecord] = field(default_factory=list)
    full_evals: int = 0
    subset_evals: int = 0
    final_model: KernelModel | None = None

    def csv_rows(self):
        yield "phase,step,mll,grad_norm,seconds,cg_iterations"
        for r in self.records:
            yield (f"{r.phase},{r.step},{r.mll:.12g},{r.grad_norm:.12g},"
                   f"{r.seconds:.6g},{r.cg_iterations}")


class MllObjective:
    """Negative MLL over the raw parameter vector, bound to one data set.

    Calls are (raw, step) -> (value, gradient). With fresh_probes each
    optimization step draws new probe vectors from base_seed + step; the
    fixed mode reuses base_seed so the objective is fully deterministic.
    Evaluations that blow up numerically return +inf so optimizers can
    back off.
    """

    def __init__(self, template: KernelModel, X, y, *, cg: CgConfig,
                 rows_per_partition=None,
                 memory_budget_bytes=DEFAULT_BUDGET_BYTES, workers=1,
                 base_seed=0, fresh_probes=True, label="full"):
        self.template = template
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        n = self.X.shape[0]
        if rows_per_partition is not None:
            self.plan = plan_partitions(n, min(rows_per_partition, n))
        else:
            self.plan = plan_from_budget(n, memory_budget_bytes)
        self.pool = WorkerPool(workers=workers,
                               scratch_entries=max(self.plan.block_entries,
                                                   memory_budget_bytes // 8))
        self.cg = cg
        self.base_seed = int(base_seed)
        self.fresh_probes = fresh_probes
        self.label = label
        self.evals = 0
        self.cg_iterations = 0
        self.last_cg_iterations = 0

    def probe_seed(self, step: int) -> int:
        return self.base_seed + step if self.fresh_probes else self.base_seed

    def model_at(self, raw: np.ndarray) -> KernelModel:
        return kernels.raw_to_model(self.template, raw)

    def __call__(self, raw, step):
        self.evals += 1
        model = self.model_at(raw)
        try:
            res = mll_value_and_grad(model, self.X, self.y, self.plan,
                                     self.pool, self.cg, self.probe_seed(step))
        except NumericError:
            self.last_cg_iterations = 0
            return np.inf, np.full_like(np.asarray(raw, dtype=np.float64), np.nan)
        self.cg_iterations += res.diagnostics.iterations
        self.last_cg_iterations = res.diagnostics.iterations
        grad = kernels.raw_gradient(model, np.asarray(raw, dtype=np.float64),
                                    res.gradients)
        return -res.value, -grad


def adam_run(objective, x0: np.ndarray, config: AdamConfig, *,
             trace: TrainTrace | None = None, phase: str = "adam"):
    """Minimize with Adam (bias-corrected moments).

    If an evaluation comes back non-finite, the previous update is halved
    and retried once; a second failure aborts with the partial trace
    attached to the raised TrainingError.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    trace = trace if trace is not None else TrainTrace()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    prev_x = None
    prev_delta = None
    for step in range(1, config.steps + 1):
        started = time.perf_counter()
        value, grad = objective(x, step)
        if not np.isfinite(value):
            if prev_delta is None:
                raise TrainingError(
                    f"{phase}: objective non-finite at the starting point", trace)
            x = prev_x + 0.5 * prev_delta
            value, grad = objective(x, step)
            if not np.isfinite(value):
                raise TrainingError(
                    f"{phase}: objective stayed non-finite after halving "
                    f"the step at iteration {step}", trace)
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
        mhat = m / (1.0 - config.beta1 ** step)
        vhat = v / (1.0 - config.beta2 ** step)
        delta = -config.lr * mhat / (np.sqrt(vhat) + config.eps)
        prev_x = x.copy()
        prev_delta = delta
        x = x + delta
        trace.records.append(StepRecord(
            phase=phase, step=step, objective_value=float(value),
            grad_norm=float(np.linalg.norm(grad)),
            seconds=time.perf_counter() - started,
            cg_iterations=getattr(objective, "last_cg_iterations", 0),
        ))
    return x, trace


def lbfgs_run(objective, x0: np.ndarray, config: LbfgsConfig, *,
              trace: TrainTrace | None = None, phase: str = "lbfgs"):
    """Minimize with L-BFGS: two-loop recursion over a bounded history and
    a backtracking Armijo line search.

    Every evaluation inside one outer step shares that step's probe seed,
    so the line search compares values of the same realized function. A
    failed line search falls back to a unit gradient step (length 1/|g|).
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    trace = trace if trace is not None else TrainTrace()
    history: list[tuple[np.ndarray, np.ndarray, float]] = []
    fx, gx = None, None
    last_key = None
    for step in range(1, config.steps + 1):
        started = time.perf_counter()
        key = objective.probe_seed(step) if hasattr(objective, "probe_seed") else step
        if fx is None or key != last_key:
            fx, gx = objective(x, step)
        last_key = key
        if not np.isfinite(fx):
            raise TrainingError(f"{phase}: objective non-finite at iteration {step}",
                                trace)
        gnorm = float(np.linalg.norm(gx))
        if gnorm == 0.0:
            trace.records.append(StepRecord(
                phase=phase, step=step, objective_value=float(fx), grad_norm=0.0,
                seconds=time.perf_counter() - started,
                cg_iterations=getattr(objective, "last_cg_iterations", 0)))
            break

        d = _two_loop_direction(gx, history)
        descent = float(gx @ d)
        if descent >= 0.0:
            d = -gx
            descent = -gnorm ** 2
        t = 1.0 if history else min(1.0, 1.0 / gnorm)

        accepted = False
        f_new = g_new = None
        x_new = None
        for _ in range(config.max_backtracks):
            x_new = x + t * d
            f_new, g_new = objective(x_new, step)
            if np.isfinite(f_new) and f_new <= fx + config.armijo_c1 * t * descent:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            x_new = x - gx / gnorm
            f_new, g_new = objective(x_new, step)
            if not np.isfinite(f_new):
                raise TrainingError(
                    f"{phase}: line search and gradient fallback both failed "
                    f"at iteration {step}", trace)

        s = x_new - x
        yv = g_new - gx
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv) + 1e-300):
            history.append((s, yv, 1.0 / sy))
            if len(history) > config.history:
                history.pop(0)

        x, fx, gx = x_new, f_new, g_new
        trace.records.append(StepRecord(
            phase=phase, step=step, objective_value=float(fx),
            grad_norm=float(np.linalg.norm(gx)),
            seconds=time.perf_counter() - started,
            cg_iterations=getattr(objective, "last_cg_iterations", 0)))
    return x, trace


def _two_loop_direction(g, history):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    if history:
        s, y, _ = history[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


# ---------------------------------------------------------------------------
# Training protocols.
# ---------------------------------------------------------------------------

def _phase_seeds(seed: int, count: int) -> list[int]:
    root = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in root.spawn(count)]


def _objective_for(template, X, y, config: TrainConfig, base_seed, label):
    return MllObjective(
        template, X, y, cg=config.cg,
        rows_per_partition=config.rows_per_partition,
        memory_budget_bytes=config.memory_budget_bytes,
        workers=config.workers, base_seed=base_seed,
        fresh_probes=config.fresh_probes, label=label,
    )


def initial_model(config: TrainConfig, d: int, y_train: np.ndarray) -> KernelModel:
    return kernels.default_model(
        config.family, d, ard=config.ard, noise_floor=config.noise_floor,
        target_mean=float(np.mean(y_train)),
    )


def pretrain_finetune(X, y, config: TrainConfig):
    """Subset pretraining followed by full-data fine-tuning.

    Uniformly subsamples min(pretrain_subset, n) points with the run seed,
    runs 10 L-BFGS steps and then pretrain_adam_steps Adam steps on the
    subset likelihood, transfers the hyperparameters, and fine-tunes with
    finetune_steps Adam steps on the full likelihood. When the subset
    saturates the data the protocol degenerates to running every phase on
    the full set.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    subset_seed, lbfgs_seed, adam_seed, finetune_seed = _phase_seeds(config.seed, 4)

    k = min(config.pretrain_subset, n)
    rng = np.random.default_rng(subset_seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    X_sub, y_sub = X[idx], y[idx]

    template = initial_model(config, X.shape[1], y)
    raw = kernels.model_to_raw(template)
    trace = TrainTrace()

    sub_obj = _objective_for(template, X_sub, y_sub, config, lbfgs_seed, "subset")
    try:
        raw, trace = lbfgs_run(sub_obj, raw, config.lbfgs, trace=trace,
                               phase="pretrain-lbfgs")
        sub_obj.base_seed = adam_seed
        adam_pre = replace(config.adam, steps=config.pretrain_adam_steps)
        raw, trace = adam_run(sub_obj, raw, adam_pre, trace=trace,
                              phase="pretrain-adam")
        trace.subset_evals += sub_obj.evals

        full_obj = _objective_for(template, X, y, config, finetune_seed, "full")
        adam_fine = replace(config.adam, steps=config.finetune_steps)
        raw, trace = adam_run(full_obj, raw, adam_fine, trace=trace,
                              phase="finetune-adam")
        trace.full_evals += full_obj.evals
    except TrainingError as exc:
        exc.trace = trace
        raise
    trace.final_model = kernels.raw_to_model(template, raw)
    return trace.final_model, trace


def full_adam(X, y, config: TrainConfig):
    """Adam on the full-data likelihood from the default initialization."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    (adam_seed,) = _phase_seeds(config.seed, 1)
    template = initial_model(config, X.shape[1], y)
    raw = kernels.model_to_raw(template)
    obj = _objective_for(template, X, y, config, adam_seed, "full")
    trace = TrainTrace()
    try:
        raw, trace = adam_run(obj, raw, config.adam, trace=trace, phase="full-adam")
    except TrainingError as exc:
        exc.trace = trace
        raise
    trace.full_evals += obj.evals
    trace.final_model = kernels.raw_to_model(template, raw)
    return trace.final_model, trace


def train(X, y, config: TrainConfig):
    """Dispatch on the configured protocol."""
    if config.protocol == "pretrain-finetune":
        return pretrain_finetune(X, y, config)
    return full_adam(X, y, config)
