"""Partition plans and the blocked, parallel MVM executor."""

import os
import time

import numpy as np
import pytest

from blockgp import (KernelModel, NumericError, WorkerPool, partitioned_mvm,
                     plan_from_budget, plan_partitions, track_allocations)
from blockgp import kernels
from blockgp.partition import communication_model

from conftest import make_instance


class TestPlanPartitions:
    def test_ceiling_arithmetic(self):
        plan = plan_partitions(10, 3)
        assert plan.ranges == ((0, 3), (3, 6), (6, 9), (9, 10))
        assert plan.num_partitions == 4

    def test_single_partition_degenerate_case(self):
        plan = plan_partitions(5, 5)
        assert plan.ranges == ((0, 5),)
        assert plan.num_partitions == 1

    def test_houseelectric_scale_partition_count(self):
        # 1,311,539 rows at 218 partitions needs ceil(n / 218) rows each.
        n = 1_311_539
        rows = -(-n // 218)
        plan = plan_partitions(n, rows)
        assert plan.num_partitions == 218

    def test_ranges_cover_and_are_disjoint(self):
        for n, rows in [(1, 1), (17, 4), (100, 7), (64, 64), (64, 100)]:
            plan = plan_partitions(n, rows)
            seen = []
            for start, stop in plan.ranges:
                assert stop - start <= rows
                seen.extend(range(start, stop))
            assert seen == list(range(n))

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            plan_partitions(0, 3)
        with pytest.raises(ValueError):
            plan_partitions(10, 0)

    def test_budget_plan_fits_budget(self):
        plan = plan_from_budget(10_000, budget_bytes=8 * 10_000 * 250)
        assert plan.rows_per_partition == 250
        assert plan.block_entries * 8 <= 8 * 10_000 * 250


class TestPartitionedMvm:
    def test_identity_kernel(self):
        # unit-noise zero kernel: rows of the identity
        def eye_rows(X, a, b):
            out = np.zeros((b - a, X.shape[0]))
            out[np.arange(b - a), np.arange(a, b)] = 1.0
            return out

        X = np.zeros((3, 1))
        v = np.array([1.0, 2.0, 3.0])
        for rows in (1, 2, 3):
            got = partitioned_mvm(eye_rows, X, v, plan_partitions(3, rows),
                                  WorkerPool())
            np.testing.assert_array_equal(got, v)

    @pytest.mark.parametrize("rows_per_partition", [1, 3, 8, 25, 50])
    def test_matches_dense_product(self, rows_per_partition):
        X, _, model = make_instance(50, 3, seed=1)
        V = np.random.default_rng(2).standard_normal((50, 4))
        dense = kernels.kernel_block(model, X, X, add_noise=True)
        expected = dense @ V
        got = partitioned_mvm(kernels.training_mvm_oracle(model), X, V,
                              plan_partitions(50, rows_per_partition),
                              WorkerPool(workers=2))
        assert np.max(np.abs(got - expected)) <= 1e-12 * np.max(np.abs(expected))

    @pytest.mark.parametrize("n", [37, 200])
    def test_exactness_across_plans(self, n):
        X, _, model = make_instance(n, 2, family="matern32", seed=3)
        V = np.random.default_rng(4).standard_normal((n, 3))
        dense = kernels.kernel_block(model, X, X, add_noise=True) @ V
        for rows in (1, 3, n // 2 or 1, n, n + 7):
            got = partitioned_mvm(kernels.training_mvm_oracle(model), X, V,
                                  plan_partitions(n, rows), WorkerPool())
            assert np.max(np.abs(got - dense)) <= 1e-12

    def test_bitwise_identical_across_worker_counts(self):
        X, _, model = make_instance(120, 4, seed=5)
        V = np.random.default_rng(6).standard_normal((120, 5))
        plan = plan_partitions(120, 13)
        results = [
            partitioned_mvm(kernels.training_mvm_oracle(model), X, V, plan,
                            WorkerPool(workers=w))
            for w in (1, 2, 3)
        ]
        assert np.array_equal(results[0], results[1])
        assert np.array_equal(results[0], results[2])

    def test_dimension_mismatch_rejected(self):
        X, _, model = make_instance(10, 2)
        V = np.ones((7, 2))  # wrong row count
        with pytest.raises(ValueError):
            partitioned_mvm(kernels.training_mvm_oracle(model), X, V,
                            plan_partitions(10, 4), WorkerPool())

    def test_non_finite_kernel_entry_names_partition(self):
        def poisoned(X, a, b):
            block = np.ones((b - a, X.shape[0]))
            if a <= 5 < b:
                block[5 - a, 0] = np.nan
            return block

        X = np.zeros((10, 1))
        with pytest.raises(NumericError, match="partition 1"):
            partitioned_mvm(poisoned, X, np.ones(10), plan_partitions(10, 4),
                            WorkerPool())

    def test_scratch_budget_enforced(self):
        X, _, model = make_instance(100, 2)
        pool = WorkerPool(workers=1, scratch_entries=10)  # far below one block
        with pytest.raises(ValueError, match="scratch"):
            partitioned_mvm(kernels.training_mvm_oracle(model), X,
                            np.ones(100), plan_partitions(100, 10), pool)


class TestMemoryContract:
    def test_largest_transient_buffer_is_one_block(self):
        X, _, model = make_instance(400, 3, seed=7)
        V = np.random.default_rng(8).standard_normal((400, 6))
        plan = plan_partitions(400, 50)
        with track_allocations() as tracker:
            partitioned_mvm(kernels.training_mvm_oracle(model), X, V, plan,
                            WorkerPool(workers=2))
        assert tracker.max_single_entries <= plan.block_entries
        assert tracker.num_allocations >= plan.num_partitions

    def test_tracemalloc_agrees_at_small_scale(self):
        import tracemalloc

        X, _, model = make_instance(1000, 2, seed=9)
        V = np.random.default_rng(10).standard_normal((1000, 4))
        plan = plan_partitions(1000, 100)
        oracle = kernels.training_mvm_oracle(model)
        partitioned_mvm(oracle, X, V, plan, WorkerPool())  # warm caches
        tracemalloc.start()
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        partitioned_mvm(oracle, X, V, plan, WorkerPool())
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        # one 100x1000 block plus the n x t output and small temporaries;
        # far below the 1000^2 dense matrix (8 MB)
        assert peak - base < 3_000_000

    def test_communication_stays_linear(self):
        plan = plan_partitions(50_000, 1000)
        pool = WorkerPool(workers=4, scratch_entries=plan.block_entries)
        t = 8
        bytes_moved = communication_model(plan, pool, t)["total_bytes"]
        assert bytes_moved == (pool.workers + 1) * plan.n * t * 8
        # two orders of magnitude below shipping the kernel matrix
        assert bytes_moved * 100 < plan.n ** 2 * 8


@pytest.mark.slow
class TestWorkerScaling:
    def test_two_workers_beat_single_at_06_efficiency(self):
        if len(os.sched_getaffinity(0)) < 2:
            pytest.skip("needs at least 2 CPUs")
        from threadpoolctl import threadpool_limits

        X, _, model = make_instance(20_000, 4, seed=11, noise=0.3)
        V = np.random.default_rng(12).standard_normal((20_000, 4))
        plan = plan_partitions(20_000, 2000)
        oracle = kernels.training_mvm_oracle(model)

        def timed(workers):
            pool = WorkerPool(workers=workers, scratch_entries=plan.block_entries)
            partitioned_mvm(oracle, X, V, plan, pool)  # warmup
            times = []
            for _ in range(3):
                started = time.perf_counter()
                partitioned_mvm(oracle, X, V, plan, pool)
                times.append(time.perf_counter() - started)
            return min(times)

        with threadpool_limits(limits=1):
            t1 = timed(1)
            t2 = timed(2)
        speedup = t1 / t2
        assert speedup >= 0.6 * 2, f"2-worker speedup {speedup:.2f} below 1.2x"
