"""Tests for the deterministic worker pool."""

import numpy as np
import pytest

from inlaplus import scheduler
from inlaplus.errors import WorkerFailure
from inlaplus.scheduler import TaskBatch, WorkerPool


def heavy_eval(theta):
    """A nontrivial pure float computation standing in for an objective."""
    theta = np.asarray(theta, dtype=float)
    a = np.outer(theta, theta) + np.eye(len(theta))
    sign, logdet = np.linalg.slogdet(a)
    return float(logdet + np.sum(np.sin(theta)))


class TestAssign:
    def test_six_tasks_five_workers(self):
        batch = TaskBatch(tuple(range(6)), "exploration")
        plan = scheduler.assign(batch, WorkerPool(5))
        loads = sorted(len(v) for v in plan.values())
        assert loads == [1, 1, 1, 1, 2]

    def test_more_workers_than_tasks(self):
        batch = TaskBatch(tuple(range(3)), "exploration")
        plan = scheduler.assign(batch, WorkerPool(8))
        assert all(len(v) <= 1 for v in plan.values())

    def test_forty_five_each(self):
        batch = TaskBatch(tuple(range(45)), "exploration")
        plan = scheduler.assign(batch, WorkerPool(45))
        assert all(len(v) == 1 for v in plan.values())

    @pytest.mark.parametrize("n_tasks,n_workers", [(7, 3), (16, 5), (9, 9), (10, 4)])
    def test_load_balance(self, n_tasks, n_workers):
        batch = TaskBatch(tuple(range(n_tasks)), "hessian")
        plan = scheduler.assign(batch, WorkerPool(n_workers))
        loads = [len(v) for v in plan.values()]
        assert max(loads) - min(loads) <= 1


class TestRecommendedWorkers:
    def test_central_difference(self):
        assert scheduler.recommended_workers("gradient_central", 6) == 13

    def test_exploration(self):
        assert scheduler.recommended_workers("exploration", 6, p=45) == 45

    def test_forward_single_hyper(self):
        assert scheduler.recommended_workers("gradient_forward", 1) == 2

    def test_hessian_capped(self):
        assert scheduler.recommended_workers("hessian", 2) == 12
        assert scheduler.recommended_workers("hessian", 50, cap=64) == 64


class TestRunBatch:
    def test_identity_order_preserved(self):
        payloads = tuple(float(i) for i in range(10))
        batch = TaskBatch(payloads, "exploration")
        for w in (1, 3, 10):
            out = scheduler.run_batch(batch, WorkerPool(w), lambda x: x)
            assert out == list(payloads)

    def test_bit_identical_across_worker_counts(self):
        rng = np.random.default_rng(0)
        payloads = tuple(rng.standard_normal(4) for _ in range(9))
        batch = TaskBatch(payloads, "gradient_central")
        base = scheduler.run_batch(batch, WorkerPool(1), heavy_eval)
        for w in (2, 3, 4, 9):
            out = scheduler.run_batch(batch, WorkerPool(w), heavy_eval)
            assert out == base  # exact float equality

    def test_single_task_many_workers(self):
        batch = TaskBatch((2.0,), "exploration")
        out = scheduler.run_batch(batch, WorkerPool(8), lambda x: x * 2)
        assert out == [4.0]

    def test_worker_failure_carries_lowest_task_id(self):
        def flaky(x):
            if x >= 3:
                raise ValueError("boom")
            return x

        batch = TaskBatch(tuple(range(6)), "exploration")
        with pytest.raises(WorkerFailure) as err:
            scheduler.run_batch(batch, WorkerPool(4), flaky)
        assert err.value.task_id == 3

    def test_pool_serializes_batches(self):
        # the lock releases after a run, so the pool is reusable
        pool = WorkerPool(2)
        batch = TaskBatch((1.0, 2.0), "exploration")
        assert scheduler.run_batch(batch, pool, lambda x: x) == [1.0, 2.0]
        assert scheduler.run_batch(batch, pool, lambda x: -x) == [-1.0, -2.0]


class TestWireFormat:
    def test_frame_roundtrip(self):
        data = np.array([1.5, -2.25, 3.75])
        frame = scheduler.encode_frame(7, scheduler.STAGE_CODES["hessian"], data)
        length = int.from_bytes(frame[:4], "little")
        assert length == len(frame) - 4
        tid, code, decoded = scheduler.decode_payload(frame[4:])
        assert tid == 7
        assert code == scheduler.STAGE_CODES["hessian"]
        np.testing.assert_array_equal(decoded, data)

    def test_process_mode_matches_thread_mode(self):
        rng = np.random.default_rng(1)
        payloads = tuple(rng.standard_normal(5) for _ in range(7))
        batch = TaskBatch(payloads, "exploration")

        def fn(theta):
            theta = np.asarray(theta, dtype=float)
            return np.array([heavy_eval(theta), theta.sum()])

        thread_out = scheduler.run_batch(batch, WorkerPool(3), fn)
        proc_out = scheduler.run_batch_processes(batch, WorkerPool(3), fn)
        assert len(proc_out) == len(thread_out)
        for a, b in zip(thread_out, proc_out):
            np.testing.assert_array_equal(a, b)

    def test_process_mode_failure(self):
        def fn(theta):
            if theta[0] > 1.5:
                raise RuntimeError("bad task")
            return np.array([1.0])

        payloads = (np.array([0.0]), np.array([2.0]), np.array([1.0]))
        batch = TaskBatch(payloads, "exploration")
        with pytest.raises(WorkerFailure) as err:
            scheduler.run_batch_processes(batch, WorkerPool(2), fn)
        assert err.value.task_id == 1
