"""Deterministic work distribution for objective evaluations.

A batch of pure-function tasks is statically assigned to a pool of isolated
workers (round-robin by task id), results are gathered by the master and
reduced in ascending task-id order.  That fixed reduction order is what makes
every downstream quantity bit-identical regardless of the worker count.

Two realizations share the same assign/gather semantics:

* in-process worker threads exchanging work over queues (the default; dense
  linear algebra releases the GIL, so threads scale), and
* an optional multi-process mode that forks worker processes communicating
  over local sockets with length-prefixed binary frames.

Wire format of the multi-process mode, little-endian throughout::

    frame   = u32 length | payload
    payload = u32 task_id | u8 stage | f64[] data

Stage codes are the index into ``STAGES``; code 255 marks a worker failure
(the data array is empty and the master raises ``WorkerFailure``).
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import WorkerFailure

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - threadpoolctl is a declared dependency
    threadpool_limits = None

STAGES = (
    "gradient_forward",
    "gradient_central",
    "hessian",
    "exploration",
    "latent_per_point",
)
STAGE_CODES = {name: i for i, name in enumerate(STAGES)}
FAILURE_CODE = 255

DEFAULT_WORKER_CAP = 64


@dataclass(frozen=True)
class TaskBatch:
    """Ordered tasks with dense ids 0..T-1 and a stage tag."""

    payloads: tuple
    stage: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        object.__setattr__(self, "payloads", tuple(self.payloads))
        if len(self.payloads) == 0:
            raise ValueError("batch must contain at least one task")

    def __len__(self) -> int:
        return len(self.payloads)

    @property
    def task_ids(self) -> range:
        return range(len(self.payloads))


@dataclass
class WorkerPool:
    """A fixed set of isolated executors.

    ``intra_parallelism`` caps the BLAS/LAPACK threads each task may use; it
    must stay constant across runs for results to be worker-count invariant.
    The pool is not reentrant: one batch at a time.
    """

    worker_count: int = 1
    intra_parallelism: int = 1
    _busy: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.intra_parallelism < 1:
            raise ValueError("intra_parallelism must be >= 1")


def assign(batch: TaskBatch, pool: WorkerPool) -> Dict[int, List[int]]:
    """Round-robin assignment by task id; loads differ by at most one."""
    out: Dict[int, List[int]] = {w: [] for w in range(pool.worker_count)}
    for tid in batch.task_ids:
        out[tid % pool.worker_count].append(tid)
    return out


def recommended_workers(stage: str, t: int, p: Optional[int] = None,
                        cap: int = DEFAULT_WORKER_CAP) -> int:
    """Process count saturating each parallel stage.

    Forward gradients need t+1 simultaneous evaluations, central 2t+1,
    the Hessian up to 2(t^2+t), and exploration one per plan point.
    """
    if stage == "gradient_forward":
        return t + 1
    if stage == "gradient_central":
        return 2 * t + 1
    if stage == "hessian":
        return min(2 * (t * t + t), cap)
    if stage == "exploration":
        if p is None:
            raise ValueError("exploration stage needs the plan size p")
        return p
    raise ValueError(f"unknown stage {stage!r}")


def _limits_context(pool: WorkerPool):
    if threadpool_limits is None:
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=pool.intra_parallelism)


def run_batch(batch: TaskBatch, pool: WorkerPool, eval_fn: Callable) -> list:
    """Evaluate every task and return results ordered by task id.

    ``eval_fn`` must be a pure function of the payload.  The first failing
    task (lowest id) is reported via WorkerFailure; there is no retry.
    """
    with pool._busy:
        n_workers = min(pool.worker_count, len(batch))
        results: dict = {}
        failures: dict = {}

        if n_workers == 1:
            with _limits_context(pool):
                for tid in batch.task_ids:
                    try:
                        results[tid] = eval_fn(batch.payloads[tid])
                    except Exception as exc:
                        raise WorkerFailure(tid, exc) from exc
            return [results[tid] for tid in batch.task_ids]

        sub_pool = WorkerPool(n_workers, pool.intra_parallelism)
        plan = assign(batch, sub_pool)
        out_q: queue.Queue = queue.Queue()

        def worker_loop(worker_id: int):
            for tid in plan[worker_id]:
                try:
                    out_q.put((tid, True, eval_fn(batch.payloads[tid])))
                except Exception as exc:  # forwarded to master, no retry
                    out_q.put((tid, False, exc))

        with _limits_context(pool):
            threads = [
                threading.Thread(target=worker_loop, args=(w,), daemon=True)
                for w in range(n_workers)
            ]
            for th in threads:
                th.start()
            for _ in batch.task_ids:
                tid, ok, value = out_q.get()
                (results if ok else failures)[tid] = value
            for th in threads:
                th.join()

        if failures:
            tid = min(failures)
            raise WorkerFailure(tid, failures[tid]) from failures[tid]
        return [results[tid] for tid in batch.task_ids]


# ---------------------------------------------------------------------------
# multi-process mode


def encode_frame(task_id: int, stage_code: int, data: np.ndarray) -> bytes:
    data = np.ascontiguousarray(np.asarray(data, dtype="<f8")).ravel()
    payload = struct.pack("<IB", task_id, stage_code) + data.tobytes()
    return struct.pack("<I", len(payload)) + payload


def decode_payload(payload: bytes):
    task_id, stage_code = struct.unpack_from("<IB", payload, 0)
    data = np.frombuffer(payload[5:], dtype="<f8").copy()
    return task_id, stage_code, data


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("socket closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    (length,) = struct.unpack("<I", _read_exact(sock, 4))
    if length == 0:
        return None  # shutdown sentinel
    return decode_payload(_read_exact(sock, length))


def write_frame(sock: socket.socket, task_id: int, stage_code: int,
                data: np.ndarray) -> None:
    sock.sendall(encode_frame(task_id, stage_code, data))


def _send_shutdown(sock: socket.socket) -> None:
    sock.sendall(struct.pack("<I", 0))


def _process_worker_main(sock, eval_fn, intra_parallelism):
    limiter = (
        threadpool_limits(limits=intra_parallelism)
        if threadpool_limits is not None
        else None
    )
    try:
        while True:
            frame = read_frame(sock)
            if frame is None:
                break
            task_id, stage_code, data = frame
            try:
                value = eval_fn(data)
                out = np.atleast_1d(np.asarray(value, dtype=float))
                write_frame(sock, task_id, stage_code, out)
            except Exception:
                write_frame(sock, task_id, FAILURE_CODE, np.empty(0))
    finally:
        if limiter is not None:
            limiter.unregister()
        sock.close()


def run_batch_processes(batch: TaskBatch, pool: WorkerPool, eval_fn: Callable) -> list:
    """Multi-process variant of run_batch.

    Workers are forked, so ``eval_fn`` may be any closure; payloads must be
    1-D float arrays and results come back as float64 arrays per the wire
    format.  Assignment and reduction order are identical to the thread mode.
    """
    import multiprocessing

    ctx = multiprocessing.get_context("fork")
    with pool._busy:
        n_workers = min(pool.worker_count, len(batch))
        sub_pool = WorkerPool(n_workers, pool.intra_parallelism)
        plan = assign(batch, sub_pool)
        stage_code = STAGE_CODES[batch.stage]

        sockets, procs = [], []
        for w in range(n_workers):
            parent, child = socket.socketpair()
            proc = ctx.Process(
                target=_process_worker_main,
                args=(child, eval_fn, pool.intra_parallelism),
                daemon=True,
            )
            proc.start()
            child.close()
            sockets.append(parent)
            procs.append(proc)

        results: dict = {}
        failures: dict = {}
        try:
            for w in range(n_workers):
                for tid in plan[w]:
                    payload = np.asarray(batch.payloads[tid], dtype=float).ravel()
                    write_frame(sockets[w], tid, stage_code, payload)
            for w in range(n_workers):
                for _ in plan[w]:
                    tid, code, data = read_frame(sockets[w])
                    if code == FAILURE_CODE:
                        failures[tid] = RuntimeError("worker task raised")
                    else:
                        results[tid] = data
        finally:
            for sock in sockets:
                try:
                    _send_shutdown(sock)
                except OSError:
                    pass
                sock.close()
            for proc in procs:
                proc.join(timeout=10)

        if failures:
            tid = min(failures)
            raise WorkerFailure(tid, failures[tid])
        return [results[tid] for tid in batch.task_ids]
