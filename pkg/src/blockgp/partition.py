"""Row-partitioned, parallel matrix-vector products with bounded worker memory.

The kernel matrix is never materialized. Each partition is a contiguous
row range; a worker materializes the corresponding row block, multiplies it
against the right-hand sides, writes its disjoint output rows, and discards
the block. Peak transient memory per worker is one row block.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import NumericError

DEFAULT_BUDGET_BYTES = 1 << 30  # 1 GiB of block scratch per worker
_FLOAT_BYTES = 8


@dataclass(frozen=True)
class PartitionPlan:
    """Decomposition of n rows into contiguous half-open ranges.

    ranges are disjoint, ordered, cover [0, n), and each spans at most
    rows_per_partition rows (the last may be shorter).
    """

    n: int
    rows_per_partition: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def num_partitions(self) -> int:
        return len(self.ranges)

    @property
    def block_entries(self) -> int:
        """Entry count of the largest row block a worker materializes."""
        return self.rows_per_partition * self.n


@dataclass(frozen=True)
class WorkerPool:
    """An abstract pool of w workers, each with a scratch budget in entries."""

    workers: int = 1
    scratch_entries: int = DEFAULT_BUDGET_BYTES // _FLOAT_BYTES

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.scratch_entries < 1:
            raise ValueError("scratch_entries must be >= 1")


def plan_partitions(n: int, rows_per_partition: int) -> PartitionPlan:
    """Split n rows into ceil(n / rows_per_partition) contiguous ranges.

    rows_per_partition == n (or larger) reproduces the unpartitioned case
    with a single range.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if rows_per_partition < 1:
        raise ValueError(
            f"rows_per_partition must be >= 1, got {rows_per_partition}"
        )
    ranges = tuple(
        (start, min(start + rows_per_partition, n))
        for start in range(0, n, rows_per_partition)
    )
    return PartitionPlan(n=n, rows_per_partition=min(rows_per_partition, n), ranges=ranges)


def plan_from_budget(n: int, budget_bytes: int = DEFAULT_BUDGET_BYTES) -> PartitionPlan:
    """Choose rows_per_partition so one row block fits the memory budget."""
    rows = max(1, min(n, budget_bytes // (_FLOAT_BYTES * n)))
    return plan_partitions(n, rows)


# ---------------------------------------------------------------------------
# Transient-allocation tracking.
#
# The executor and the built-in kernel oracles route their block buffers
# through transient()/release() so tests can assert the memory contract:
# no single transient buffer ever exceeds one row block.
# ---------------------------------------------------------------------------

class AllocationTracker:
    """Records transient buffers allocated during partitioned execution."""

    def __init__(self):
        self._lock = threading.Lock()
        self.max_single_entries = 0
        self.live_entries = 0
        self.peak_live_entries = 0
        self.num_allocations = 0

    def _note(self, entries: int) -> None:
        with self._lock:
            self.num_allocations += 1
            self.max_single_entries = max(self.max_single_entries, entries)
            self.live_entries += entries
            self.peak_live_entries = max(self.peak_live_entries, self.live_entries)

    def _drop(self, entries: int) -> None:
        with self._lock:
            self.live_entries -= entries


_active_tracker: AllocationTracker | None = None
_tracker_guard = threading.Lock()


@contextmanager
def track_allocations():
    """Activate transient-buffer tracking for the enclosed block."""
    global _active_tracker
    tracker = AllocationTracker()
    with _tracker_guard:
        if _active_tracker is not None:
            raise RuntimeError("allocation tracking is already active")
        _active_tracker = tracker
    try:
        yield tracker
    finally:
        with _tracker_guard:
            _active_tracker = None


def transient(shape, dtype=np.float64) -> np.ndarray:
    """Allocate a tracked transient buffer."""
    buf = np.empty(shape, dtype=dtype)
    tracker = _active_tracker
    if tracker is not None:
        tracker._note(buf.size)
    return buf


def release(buf: np.ndarray) -> None:
    """Mark a tracked transient buffer as discarded."""
    tracker = _active_tracker
    if tracker is not None:
        tracker._drop(buf.size)


# ---------------------------------------------------------------------------
# Execution.
# ---------------------------------------------------------------------------

def run_row_blocks(plan: PartitionPlan, pool: WorkerPool, task) -> None:
    """Run task(partition_index, start, stop) once per range in the plan.

    Ranges are dispatched round-robin to a fixed-size worker pool: partition
    i goes to worker i mod w, and each worker processes its partitions in
    order. With one worker everything runs inline on the calling thread.
    """
    if pool.workers == 1 or plan.num_partitions == 1:
        for idx, (start, stop) in enumerate(plan.ranges):
            task(idx, start, stop)
        return

    assignments = [[] for _ in range(pool.workers)]
    for idx, (start, stop) in enumerate(plan.ranges):
        assignments[idx % pool.workers].append((idx, start, stop))

    def drive(worker_items):
        for idx, start, stop in worker_items:
            task(idx, start, stop)

    # Pin BLAS pools to one thread inside workers so the worker count is
    # the only source of parallelism (prevents thread oversubscription).
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        with ThreadPoolExecutor(max_workers=pool.workers) as executor:
            futures = [executor.submit(drive, items) for items in assignments if items]
            for future in futures:
                future.result()


def partitioned_mvm(row_block_fn, X: np.ndarray, V: np.ndarray,
                    plan: PartitionPlan, pool: WorkerPool) -> np.ndarray:
    """Compute the blocked product [row_block_fn(X, a, b) @ V for each range].

    Parameters
    ----------
    row_block_fn : callable(X, start, stop) -> ndarray
        Pure function returning rows [start, stop) of the implicit matrix.
        Each block must have V.shape[0] columns. Must be safe to call from
        several workers at once.
    X : ndarray
        Row inputs; plan.n must equal X.shape[0]. Passed through to the
        block function untouched.
    V : ndarray
        Right-hand sides, shape (columns, t) or (columns,).
    plan, pool
        Row decomposition and worker pool. Output rows of distinct
        partitions are disjoint, so the result is identical for any
        worker count.
    """
    X = np.asarray(X, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    if V.ndim != 2:
        raise ValueError(f"V must be 1- or 2-dimensional, got ndim={V.ndim}")
    if plan.n != X.shape[0]:
        raise ValueError(f"plan covers {plan.n} rows but X has {X.shape[0]}")
    if pool.scratch_entries < plan.block_entries:
        raise ValueError(
            f"worker scratch ({pool.scratch_entries} entries) is smaller than "
            f"one row block ({plan.block_entries} entries); repartition"
        )

    t = V.shape[1]
    out = np.empty((plan.n, t), dtype=np.float64)

    def task(idx, start, stop):
        block = row_block_fn(X, start, stop)
        if block.shape != (stop - start, V.shape[0]):
            raise ValueError(
                f"row block for partition {idx} has shape {block.shape}, "
                f"expected {(stop - start, V.shape[0])}"
            )
        # NaN/Inf propagate into the sum, making this a cheap full check.
        if not np.isfinite(np.sum(block)):
            raise NumericError(
                f"non-finite kernel entry in partition {idx} "
                f"(rows [{start}, {stop}))"
            )
        np.matmul(block, V, out=out[start:stop])
        release(block)

    run_row_blocks(plan, pool, task)
    return out[:, 0] if squeeze else out


def communication_model(plan: PartitionPlan, pool: WorkerPool, t: int) -> dict:
    """Bytes a distributed execution of one MVM would move, per the
    partitioning contract: every worker receives the right-hand sides once
    and returns only its disjoint output rows. Both directions are O(n*t);
    no kernel block ever crosses the wire."""
    to_workers = pool.workers * plan.n * t * _FLOAT_BYTES
    from_workers = plan.n * t * _FLOAT_BYTES
    return {
        "bytes_to_workers": to_workers,
        "bytes_from_workers": from_workers,
        "total_bytes": to_workers + from_workers,
    }
