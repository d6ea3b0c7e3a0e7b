"""In-process executor pool.

Each worker thread owns a fixed set of shards (shard i belongs to worker
i mod n_workers) and trains only clients stored in them. The leader submits
a batch of jobs and gets results back in submission order, so aggregation
never depends on thread timing. A crashed worker is restarted and every
worker must answer a health ping before the leader re-queues lost jobs.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import ExecutorShard, ShardReader
from ..model import Architecture, HyperParams, ModelParams, TaskFailed, local_train

log = logging.getLogger(__name__)

HEALTHY = 200


class WorkerCrashed(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainJob:
    job_id: int
    client_id: int
    weights: np.ndarray
    version: int
    lr: float
    seed: int


class _ShardSet:
    """Lazy access to the partitions of some shards, from memory or files."""

    def __init__(self, shards):
        self._mem = {}
        self._readers = []
        for s in shards:
            if isinstance(s, ExecutorShard):
                for p in s.partitions:
                    self._mem[p.client_id] = p
            else:
                self._readers.append(ShardReader(Path(s)))
        self._where = {cid: r for r in self._readers for cid in r.client_ids()}

    def sizes(self) -> dict:
        out = {cid: len(p) for cid, p in self._mem.items()}
        for r in self._readers:
            out.update(r.sizes)
        return out

    def get(self, client_id):
        p = self._mem.get(client_id)
        if p is None:
            p = self._where[client_id].load(client_id)
            self._mem[client_id] = p
        return p


def _train(arch, hyper, shards: _ShardSet, job: TrainJob):
    p = shards.get(job.client_id)
    return local_train(arch, ModelParams(job.weights, job.version), p.X, p.y, hyper,
                       job.seed, client_id=job.client_id, lr=job.lr)


class _Worker(threading.Thread):
    def __init__(self, wid, shards, arch, hyper, outbox, crash_after=None):
        super().__init__(name=f"fedsim-worker-{wid}", daemon=True)
        self.wid = wid
        self.shard_list = shards
        self.arch = arch
        self.hyper = hyper
        self.inbox: queue.Queue = queue.Queue()
        self.outbox = outbox
        self.crash_after = crash_after
        self.jobs_done = 0

    def run(self):
        shards = _ShardSet(self.shard_list)
        while True:
            msg = self.inbox.get()
            kind = msg[0]
            if kind == "stop":
                return
            if kind == "ping":
                self.outbox.put(("pong", self.wid, msg[1], HEALTHY))
                continue
            job = msg[1]
            if self.crash_after is not None and self.jobs_done >= self.crash_after:
                self.outbox.put(("crashed", self.wid, job.job_id))
                return
            try:
                self.outbox.put(("result", self.wid, job.job_id, _train(self.arch, self.hyper, shards, job)))
            except TaskFailed as exc:
                self.outbox.put(("result", self.wid, job.job_id, exc))
            except Exception as exc:  # report instead of hanging the leader
                self.outbox.put(("error", self.wid, job.job_id, exc))
                return
            self.jobs_done += 1


class WorkerPool:
    """Leader-side handle to ``n_workers`` executor threads.

    ``n_workers=0`` trains inline on the calling thread. ``crash_plan`` maps
    a worker index to the number of jobs it completes before dying once
    (fault injection for tests).
    """

    def __init__(self, shards, arch: Architecture, hyper: HyperParams, n_workers: int = 1,
                 crash_plan: dict | None = None):
        if n_workers < 0:
            raise ValueError("n_workers must be >= 0")
        self.arch = arch
        self.hyper = hyper
        self.n_workers = n_workers
        self.shards = list(shards)
        self.crash_plan = dict(crash_plan or {})
        self.recoveries = 0
        self._outbox: queue.Queue = queue.Queue()
        self._workers: list = []
        self._owned = [[s for i, s in enumerate(self.shards) if i % max(n_workers, 1) == w]
                       for w in range(max(n_workers, 1))]
        self.owner: dict = {}
        self.sizes: dict = {}
        for i, shard in enumerate(self.shards):
            for cid, n in _ShardSet([shard]).sizes().items():
                if cid in self.owner:
                    raise ValueError(f"client {cid} appears in more than one shard")
                self.owner[cid] = i % max(n_workers, 1)
                self.sizes[cid] = n
        self._inline = _ShardSet(self.shards) if n_workers == 0 else None
        self._ping_token = 0

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()

    def start(self):
        if self.n_workers == 0 or self._workers:
            return
        for w in range(self.n_workers):
            self._workers.append(self._spawn(w, self.crash_plan.pop(w, None)))

    def _spawn(self, w, crash_after=None):
        t = _Worker(w, self._owned[w], self.arch, self.hyper, self._outbox, crash_after)
        t.start()
        return t

    def close(self):
        for t in self._workers:
            if t.is_alive():
                t.inbox.put(("stop",))
        for t in self._workers:
            t.join(timeout=5)
        self._workers = []

    def run_batch(self, jobs: list[TrainJob]) -> list:
        """Train every job on its shard owner; results (update or TaskFailed) in job order."""
        if not jobs:
            return []
        if self.n_workers == 0:
            out = []
            for j in jobs:
                try:
                    out.append(_train(self.arch, self.hyper, self._inline, j))
                except TaskFailed as exc:
                    out.append(exc)
            return out
        if not self._workers:
            self.start()
        by_id = {j.job_id: j for j in jobs}
        if len(by_id) != len(jobs):
            raise ValueError("duplicate job ids in batch")
        results: dict = {}
        for j in jobs:
            self._workers[self.owner[j.client_id]].inbox.put(("train", j))
        while len(results) < len(jobs):
            msg = self._outbox.get()
            kind, wid = msg[0], msg[1]
            if kind == "result":
                results[msg[2]] = msg[3]
            elif kind == "crashed":
                log.warning("worker %d crashed; halting dispatch until the pool is healthy", wid)
                self._recover(wid)
                lost = [by_id[i] for i in sorted(by_id) if i not in results
                        and self.owner[by_id[i].client_id] == wid]
                for j in lost:
                    self._workers[wid].inbox.put(("train", j))
            elif kind == "error":
                raise WorkerCrashed(f"worker {wid} failed on job {msg[2]}") from msg[3]
            # stray pongs from an earlier health check are ignored
        return [results[j.job_id] for j in jobs]

    def _recover(self, wid):
        old = self._workers[wid]
        old.join(timeout=5)
        self._workers[wid] = self._spawn(wid)
        self.recoveries += 1
        self.wait_healthy()

    def wait_healthy(self, timeout: float = 30.0) -> None:
        """Block until every worker answers a ping with the healthy status code."""
        self._ping_token += 1
        token = self._ping_token
        for t in self._workers:
            t.inbox.put(("ping", token))
        pending = set(range(len(self._workers)))
        deferred = []
        while pending:
            try:
                msg = self._outbox.get(timeout=timeout)
            except queue.Empty:
                raise WorkerCrashed(f"workers {sorted(pending)} did not report healthy") from None
            if msg[0] == "pong" and msg[2] == token and msg[3] == HEALTHY:
                pending.discard(msg[1])
            else:
                deferred.append(msg)
        for m in deferred:
            self._outbox.put(m)
