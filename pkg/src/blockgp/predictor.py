"""Exact predictive means and variances from a train-time cache.

The representer weights a = (K + noise I)^{-1} (y - mean) are solved once,
at a tolerance much tighter than training, and stored. Predictive means
are then a single partitioned cross-kernel product with no solves at all;
predictive variances batch the per-test-point solves through the same
conjugate-gradient engine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cg import SolveRequest, mbcg_solve
from .errors import ConvergenceError
from .kernels import KernelModel
from .likelihood import build_kernel_preconditioner
from .partition import (DEFAULT_BUDGET_BYTES, WorkerPool, plan_from_budget,
                        plan_partitions, partitioned_mvm)

DEFAULT_CACHE_TOLERANCE = 1e-3
DEFAULT_VARIANCE_TOLERANCE = 0.01
_MAGIC_VERSION = 1
_FAMILY_CODES = {"rbf": 0, "matern32": 1}
_FAMILY_NAMES = {v: k for k, v in _FAMILY_CODES.items()}


@dataclass
class PredOutput:
    """Predictive moments; variance is the latent-function variance and
    observed_variance adds the noise."""

    mean: np.ndarray
    variance: np.ndarray
    observed_variance: np.ndarray
    clamped: int = 0


@dataclass
class PredictionCache:
    """Everything prediction needs: the model, the training inputs, and
    the representer weights with their solve provenance."""

    model: KernelModel
    X_train: np.ndarray
    weights: np.ndarray
    cache_tolerance: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X_train.shape[0]


def build_cache(model: KernelModel, X, y, plan=None, pool=None, *,
                tolerance: float = DEFAULT_CACHE_TOLERANCE,
                max_iters: int = 1000, precond_rank: int = 100) -> PredictionCache:
    """Solve for the representer weights and freeze them.

    Prediction quality hinges on this one-time solve, so the default
    tolerance (1e-3) is far below the loose training tolerance.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    plan = plan if plan is not None else plan_from_budget(n)
    pool = pool if pool is not None else WorkerPool()
    cache_p = build_kernel_preconditioner(model, X, precond_rank)
    oracle = kernels.training_mvm_oracle(model)

    def mvm(V):
        return partitioned_mvm(oracle, X, V, plan, pool)

    report = mbcg_solve(mvm, SolveRequest(
        rhs=y - model.mean, tolerance=tolerance, max_iters=max_iters,
        preconditioner=cache_p))
    if not report.converged.all():
        raise ConvergenceError(
            f"representer-weight solve stalled at relative residual "
            f"{float(report.final_relative_residuals[0]):.3e} "
            f"(requested {tolerance:g})",
            residuals=report.final_relative_residuals)
    return PredictionCache(
        model=model,
        X_train=X,
        weights=report.solutions[:, 0],
        cache_tolerance=tolerance,
        diagnostics={
            "iterations": report.iterations,
            "residual": float(report.final_relative_residuals[0]),
            "precond_rank": precond_rank,
        },
    )


def verify_cache(cache: PredictionCache, y, plan=None, pool=None) -> float:
    """Recompute the relative residual of the stored weights against the
    training targets. Valid caches satisfy residual <= cache_tolerance."""
    y = np.asarray(y, dtype=np.float64)
    n = cache.n
    plan = plan if plan is not None else plan_from_budget(n)
    pool = pool if pool is not None else WorkerPool()
    oracle = kernels.training_mvm_oracle(cache.model)
    applied = partitioned_mvm(oracle, cache.X_train, cache.weights, plan, pool)
    target = y - cache.model.mean
    return float(np.linalg.norm(applied - target) / np.linalg.norm(target))


def predict_mean(cache: PredictionCache, X_test, *, pool=None,
                 memory_budget_bytes=DEFAULT_BUDGET_BYTES,
                 rows_per_partition=None) -> np.ndarray:
    """Means for a batch of test points: mean + K(test, train) @ weights.

    Partitioned over the test rows; performs no linear solves.
    """
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    if X_test.shape[1] != cache.X_train.shape[1]:
        raise ValueError(
            f"test points have dimension {X_test.shape[1]}, "
            f"training data has {cache.X_train.shape[1]}")
    m = X_test.shape[0]
    if rows_per_partition is None:
        rows_per_partition = max(1, min(m, memory_budget_bytes // (8 * cache.n)))
    plan = plan_partitions(m, rows_per_partition)
    pool = pool if pool is not None else WorkerPool()
    oracle = kernels.cross_mvm_oracle(cache.model, cache.X_train)
    cross = partitioned_mvm(oracle, X_test, cache.weights, plan, pool)
    return cache.model.mean + cross


def predict_variance(cache: PredictionCache, X_test, *, pool=None,
                     tolerance: float = DEFAULT_VARIANCE_TOLERANCE,
                     max_iters: int = 1000, precond_rank: int = 100,
                     chunk: int = 256,
                     memory_budget_bytes=DEFAULT_BUDGET_BYTES):
    """Latent variances: k(x,x) - k_x^T (K + noise I)^{-1} k_x.

    The per-point solves run as batched CG over chunks of test columns.
    Round-off can push a variance slightly negative; such values are
    clamped to 1e-12 and counted.

    Returns (variances, clamped_count).
    """
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    if X_test.shape[1] != cache.X_train.shape[1]:
        raise ValueError("test/train dimension mismatch")
    model = cache.model
    n = cache.n
    plan = plan_from_budget(n, memory_budget_bytes)
    pool = pool if pool is not None else WorkerPool()
    cache_p = build_kernel_preconditioner(model, cache.X_train, precond_rank)
    oracle = kernels.training_mvm_oracle(model)

    def mvm(V):
        return partitioned_mvm(oracle, cache.X_train, V, plan, pool)

    m = X_test.shape[0]
    out = np.empty(m)
    clamped = 0
    for c0 in range(0, m, chunk):
        c1 = min(c0 + chunk, m)
        B = kernels.kernel_block(model, cache.X_train, X_test[c0:c1])
        report = mbcg_solve(mvm, SolveRequest(
            rhs=B, tolerance=tolerance, max_iters=max_iters,
            preconditioner=cache_p))
        if not report.converged.all():
            bad = np.flatnonzero(~report.converged)
            raise ConvergenceError(
                f"variance solves for {bad.size} test points did not reach "
                f"tolerance {tolerance:g}",
                residuals=report.final_relative_residuals)
        quad = np.einsum("ij,ij->j", B, report.solutions)
        var = model.outputscale - quad
        low = var < 1e-12
        clamped += int(np.count_nonzero(low))
        var[low] = 1e-12
        out[c0:c1] = var
    return out, clamped


def predict(cache: PredictionCache, X_test, *, pool=None,
            variance_tolerance: float = DEFAULT_VARIANCE_TOLERANCE,
            precond_rank: int = 100) -> PredOutput:
    """Means plus latent and observed variances in one call."""
    mean = predict_mean(cache, X_test, pool=pool)
    var, clamped = predict_variance(cache, X_test, pool=pool,
                                    tolerance=variance_tolerance,
                                    precond_rank=precond_rank)
    return PredOutput(mean=mean, variance=var,
                      observed_variance=var + cache.model.noise,
                      clamped=clamped)


class CgPredictor:
    """Binds a cache and a pool behind the predict(X) interface the
    evaluation harness expects."""

    def __init__(self, cache: PredictionCache, pool: WorkerPool | None = None,
                 variance_tolerance: float = DEFAULT_VARIANCE_TOLERANCE,
                 precond_rank: int = 100):
        self.cache = cache
        self.pool = pool
        self.variance_tolerance = variance_tolerance
        self.precond_rank = precond_rank

    @property
    def model(self) -> KernelModel:
        return self.cache.model

    def predict(self, X_test) -> PredOutput:
        return predict(self.cache, X_test, pool=self.pool,
                       variance_tolerance=self.variance_tolerance,
                       precond_rank=self.precond_rank)


# ---------------------------------------------------------------------------
# Binary persistence.
#
# Layout (little endian): version byte, family byte, then u64 counts
# (n, d, num_lengthscales), then f64 scalars (outputscale, noise,
# noise_floor, mean, cache_tolerance), then the f64 arrays: lengthscales,
# X_train (row major), weights.
# ---------------------------------------------------------------------------

def save_cache(cache: PredictionCache, path) -> None:
    model = cache.model
    n, d = cache.X_train.shape
    ls = model.lengthscales
    header = struct.pack(
        "<BBQQQddddd",
        _MAGIC_VERSION,
        _FAMILY_CODES[model.family],
        n, d, ls.shape[0],
        model.outputscale, model.noise, model.noise_floor, model.mean,
        cache.cache_tolerance,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ls, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cache.X_train, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cache.weights, dtype="<f8").tobytes())


def load_cache(path) -> PredictionCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize("<BBQQQddddd")
    if len(blob) < head_size:
        raise ValueError("cache file is truncated")
    (version, family_code, n, d, nls, outputscale, noise, floor, mean,
     tolerance) = struct.unpack_from("<BBQQQddddd", blob)
    if version != _MAGIC_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    if family_code not in _FAMILY_NAMES:
        raise ValueError(f"unknown kernel family code {family_code}")
    offset = head_size
    expected = head_size + 8 * (nls + n * d + n)
    if len(blob) != expected:
        raise ValueError(
            f"cache file has {len(blob)} bytes, expected {expected}")

    def take(count, shape):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return arr.reshape(shape).copy()

    ls = take(nls, (nls,))
    X = take(n * d, (n, d))
    weights = take(n, (n,))
    model = KernelModel(family=_FAMILY_NAMES[family_code],
                        outputscale=outputscale, lengthscales=ls,
                        noise=noise, mean=mean, noise_floor=floor)
    return PredictionCache(model=model, X_train=X, weights=weights,
                           cache_tolerance=tolerance)
