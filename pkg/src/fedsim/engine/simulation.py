"""End-to-end simulation on the virtual clock.

The leader loop owns the clock, the scheduler, the aggregator and the
metric file. Training is delegated to a :class:`WorkerPool` in batches
whose results come back in dispatch order, so the metric stream does not
depend on the number of workers.
"""

from __future__ import annotations

import json
import logging
import math
from bisect import bisect_right
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..devices import BandwidthModel, DevicePopulation, SampleError
from ..forecast import SystemMetrics
from ..model import (Architecture, HyperParams, ModelParams, TaskFailed, aupr, lr_at, ndcg)
from ..rng import derive_seed, stream, task_seed
from ..trace import AvailabilityIndex, AvailabilitySession
from .aggregate import AggregationError, BufferAggState, fedavg_aggregate, fedbuff_aggregate
from .checkpoint import check_fingerprint, load_checkpoint, save_checkpoint
from .scheduler import (AsyncScheduler, Outcome, SchedulerInvariantError, classify_outcome,
                        sync_round, task_duration)
from .workers import TrainJob, WorkerCrashed, WorkerPool

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.ndjson"
CHECKPOINT_FILE = "checkpoint.bin"


class SimulationError(RuntimeError):
    """A run aborted; the message names the virtual time, round and client involved."""


@dataclass(frozen=True)
class ScheduleConfig:
    mode: str = "fedbuff"
    horizon_s: float = math.inf
    concurrency: int = 100
    buffer_size: int = 10
    max_staleness: float = 10
    staleness_exponent: float = 0.5
    cohort_size: int = 10
    overcommit: float = 1.3
    deadline_s: float | None = None
    deadline_quantile: float = 95.0
    max_rounds: int | None = None
    eval_interval_s: float = 0.0
    checkpoint_every: int = 0
    uncapped_start: bool = False
    advance_on_start: bool = False
    cooldown_s: float = 0.0

    def __post_init__(self):
        if self.mode not in ("fedavg", "fedbuff"):
            raise ValueError(f"mode must be fedavg or fedbuff, got {self.mode!r}")
        if self.horizon_s < 0:
            raise ValueError("horizon_s must be >= 0")
        if self.concurrency < 1 or self.buffer_size < 1 or self.cohort_size < 1:
            raise ValueError("concurrency, buffer_size and cohort_size must be >= 1")
        if self.max_staleness < 0:
            raise ValueError("max_staleness must be >= 0")
        if self.overcommit < 1:
            raise ValueError("overcommit must be >= 1")
        if self.deadline_s is not None and not self.deadline_s > 0:
            raise ValueError("deadline_s must be > 0")
        if self.eval_interval_s < 0 or self.checkpoint_every < 0 or self.cooldown_s < 0:
            raise ValueError("eval_interval_s, checkpoint_every and cooldown_s must be >= 0")

    def fingerprint(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v)
                for k, v in asdict(self).items()}


@dataclass
class EvalSet:
    """Held-out records; ranking data (``groups`` set) is scored by NDCG@k."""

    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray | None = None
    k: int = 10

    @property
    def metric(self) -> str:
        return "aupr" if self.groups is None else "ndcg"

    def evaluate(self, arch: Architecture, weights: np.ndarray) -> tuple[float, float]:
        # loss treats any positive relevance as a positive label
        labels = (self.y > 0).astype(np.float64)
        loss = arch.loss(weights, self.X, labels)
        scores = arch.logits(weights, self.X)
        if self.groups is None:
            return loss, aupr(scores, labels)
        return loss, ndcg(scores, self.y, self.groups, self.k)


@dataclass
class SimResult:
    params: ModelParams
    records: list
    metrics: SystemMetrics
    in_flight: int = 0
    failed_rounds: int = 0
    truncated: bool = False
    flush_times: list = field(default_factory=list)
    max_concurrency: int = 0


def make_duration_fn(seed: int, population: DevicePopulation, bandwidth: BandwidthModel,
                     sizes: dict, local_epochs: int, update_mb: float):
    """duration(client, k) for the k-th task of a client, from its own seeded stream."""
    def duration(client_id, k):
        rng = stream(seed, "duration", client_id, k)
        t = population.profile_of(client_id).sample(rng)
        n = bandwidth.sample(rng)
        return task_duration(t, local_epochs, sizes[client_id], update_mb, n)
    return duration


class Simulation:
    def __init__(self, *, sessions, pool: WorkerPool, arch: Architecture, hyper: HyperParams,
                 schedule: ScheduleConfig, eval_set: EvalSet, seed: int,
                 population: DevicePopulation, bandwidth: BandwidthModel | None = None,
                 update_mb: float = 0.0, out_dir=None, data_digest: str = "",
                 init_weights: np.ndarray | None = None, on_record=None):
        self.pool = pool
        self.arch = arch
        self.hyper = hyper
        self.schedule = schedule
        self.eval_set = eval_set
        self.seed = seed
        self.update_mb = update_mb
        self.data_digest = data_digest
        self.on_record = on_record
        self.out_dir = Path(out_dir) if out_dir is not None else None
        sizes = pool.sizes
        sessions = [s for s in sessions if s.client_id in sizes]
        clients = sorted({s.client_id for s in sessions})
        if not population.assignment:
            population = population.assign(clients, derive_seed(seed, "devices"))
        missing = [c for c in clients if c not in population.assignment]
        if missing:
            raise SimulationError(f"client {missing[0]} has no device model")
        self.population = population
        self.bandwidth = bandwidth or BandwidthModel()
        self.index = AvailabilityIndex(sessions, horizon=schedule.horizon_s,
                                       cooldown_s=schedule.cooldown_s)
        self._duration = make_duration_fn(seed, population, self.bandwidth, sizes,
                                          hyper.local_epochs, update_mb)
        self._last_client = None
        if init_weights is None:
            init_weights = arch.init(stream(seed, "init"))
        self.params = ModelParams(np.asarray(init_weights, dtype=np.float64).copy(), 0)
        self.counters = SystemMetrics()
        self.records: list = []
        self.clock = 0.0
        self.rounds = 0
        self.failed_rounds = 0
        self.next_interval = 1
        self.truncated = False
        self._eval_cache = (None, None)
        self._mf = None
        # async state
        self.scheduler: AsyncScheduler | None = None
        self.flush_times: list = []
        self.snapshots: dict = {0: self.params.weights}
        self.pending: list = []
        self.buffer = BufferAggState(schedule.buffer_size, schedule.max_staleness, 0,
                                     schedule.staleness_exponent)
        # sync state
        self.client_tasks: dict = {}
        self.next_task_id = 0

    # ------------------------------------------------------------ plumbing

    def duration_fn(self, client_id, k):
        self._last_client = client_id
        return self._duration(client_id, k)

    def fingerprint(self) -> dict:
        return {"arch": asdict(self.arch), "hyper": asdict(self.hyper),
                "schedule": self.schedule.fingerprint(), "seed": self.seed,
                "data_digest": self.data_digest, "update_mb": self.update_mb}

    @property
    def metrics_path(self):
        return None if self.out_dir is None else self.out_dir / METRICS_FILE

    @property
    def checkpoint_path(self):
        return None if self.out_dir is None else self.out_dir / CHECKPOINT_FILE

    def _evaluate(self):
        v = self.params.version
        if self._eval_cache[0] != v:
            self._eval_cache = (v, self.eval_set.evaluate(self.arch, self.params.weights))
        return self._eval_cache[1]

    def _sync_counters(self):
        if self.scheduler is not None:
            self.counters.tasks_started = self.scheduler.started

    def _record(self, time: float, kind: str) -> dict:
        self._sync_counters()
        c = self.counters
        loss, quality = self._evaluate()
        in_flight = self.scheduler.in_flight if self.scheduler is not None else 0
        rec = {"virtual_time_s": time,
               "round": self.params.version if self.scheduler is not None else self.rounds,
               "loss": loss, self.eval_set.metric: quality,
               "tasks_started": c.tasks_started, "succeeded": c.succeeded,
               "interrupted": c.interrupted, "stale": c.stale,
               "device_compute_s": c.device_compute_s,
               "updates_per_s": c.attempted / time if time > 0 else 0.0,
               "kind": kind, "updates_aggregated": c.updates_aggregated,
               "in_flight": in_flight, "failed_rounds": self.failed_rounds}
        self.records.append(rec)
        if self._mf is not None:
            self._mf.write((json.dumps(rec) + "\n").encode())
            self._mf.flush()
        if self.on_record is not None:
            self.on_record(rec)
        return rec

    def _intervals_until(self, t: float, inclusive: bool = False):
        step = self.schedule.eval_interval_s
        if step <= 0 or math.isinf(t):
            return
        while True:
            b = self.next_interval * step
            if b > t or (b == t and not inclusive):
                break
            self._record(b, "interval")
            self.next_interval += 1

    # ------------------------------------------------------------ checkpoints

    def _checkpoint(self):
        if self.checkpoint_path is None:
            return
        self._sync_counters()
        header = {"fingerprint": self.fingerprint(), "clock": self.clock,
                  "version": self.params.version, "rounds": self.rounds,
                  "failed_rounds": self.failed_rounds, "next_interval": self.next_interval,
                  "counters": self.counters.to_dict(), "truncated": self.truncated,
                  "metrics_offset": self._mf.tell() if self._mf else 0,
                  "records_written": len(self.records),
                  "flush_times": self.flush_times,
                  "client_tasks": sorted(self.client_tasks.items()),
                  "next_task_id": self.next_task_id,
                  "ready_at": sorted(self.index.ready_at.items()),
                  "scheduler": self.scheduler.state() if self.scheduler else None}
        arrays = {"weights": self.params.weights}
        for v, w in self.snapshots.items():
            arrays[f"snapshot-{v:012d}"] = w
        save_checkpoint(self.checkpoint_path, header, arrays)

    def _restore(self):
        header, arrays = load_checkpoint(self.checkpoint_path)
        check_fingerprint(header["fingerprint"], json.loads(json.dumps(self.fingerprint())))
        self.clock = header["clock"]
        self.params = ModelParams(arrays.pop("weights"), header["version"])
        self.rounds = header["rounds"]
        self.failed_rounds = header["failed_rounds"]
        self.next_interval = header["next_interval"]
        self.counters = SystemMetrics(**header["counters"])
        self.truncated = header["truncated"]
        self.flush_times = header["flush_times"]
        self.client_tasks = {k: v for k, v in header["client_tasks"]}
        self.next_task_id = header["next_task_id"]
        self.index.ready_at = {k: v for k, v in header["ready_at"]}
        self.snapshots = {int(name.split("-")[1]): w for name, w in arrays.items()}
        self.snapshots[self.params.version] = self.params.weights
        self.buffer.server_version = self.params.version
        if header["scheduler"] is not None:
            self.scheduler = self._new_scheduler(prime=False)
            self.scheduler.restore(header["scheduler"])
        # drop records written after the checkpoint; they are recomputed
        with open(self.metrics_path, "r+b") as f:
            f.truncate(header["metrics_offset"])
        with open(self.metrics_path, "rb") as f:
            self.records = [json.loads(line) for line in f if line.strip()]
        if len(self.records) != header["records_written"]:
            raise SimulationError("metric file does not match the checkpoint")
        log.info("resumed at virtual time %.3f, version %d", self.clock, self.params.version)

    # ------------------------------------------------------------ run

    def _new_scheduler(self, prime=True):
        s = self.schedule
        return AsyncScheduler(self.index, self.duration_fn, s.concurrency, s.horizon_s,
                              uncapped_start=s.uncapped_start, advance_on_start=s.advance_on_start,
                              prime=prime)

    def run(self, resume: bool = False) -> SimResult:
        resumed = False
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if resume and self.checkpoint_path.exists():
                self._restore()
                resumed = True
            else:
                self.metrics_path.write_bytes(b"")
                if self.checkpoint_path.exists():
                    self.checkpoint_path.unlink()
            self._mf = open(self.metrics_path, "ab")
        try:
            if self.schedule.mode == "fedbuff":
                if not resumed:
                    self.scheduler = self._new_scheduler()
                self._run_async()
            else:
                self._run_sync()
        except (AggregationError, SchedulerInvariantError, SampleError, WorkerCrashed,
                KeyError) as exc:
            raise SimulationError(f"aborted at virtual time {self.clock:.3f}, round "
                                  f"{self.params.version}, client {self._last_client}: "
                                  f"{exc}") from exc
        finally:
            if self._mf is not None:
                self._mf.close()
                self._mf = None
        self._sync_counters()
        self.counters.virtual_wall_s = self.clock
        sch = self.scheduler
        return SimResult(self.params, self.records, self.counters,
                         in_flight=sch.in_flight if sch else 0,
                         failed_rounds=self.failed_rounds, truncated=self.truncated,
                         flush_times=list(self.flush_times),
                         max_concurrency=sch.max_c if sch else 0)

    # ------------------------------------------------------------ async

    def _run_async(self):
        s = self.schedule
        sch = self.scheduler
        c = self.counters
        while (task := sch.next_dispatch()) is not None:
            self._intervals_until(task.end)
            self.clock = task.end
            self._last_client = task.client_id
            base = bisect_right(self.flush_times, task.start)
            task.base_version = base
            staleness = self.params.version - base
            task.outcome = classify_outcome(task.end, task.session.end, staleness, s.max_staleness)
            c.device_compute_s += task.duration
            if task.outcome is Outcome.INTERRUPTED:
                c.interrupted += 1
            elif task.outcome is Outcome.STALE:
                c.stale += 1
            else:
                c.succeeded += 1
                self.pending.append(task)
                if len(self.buffer.buffer) + len(self.pending) >= s.buffer_size:
                    self._train_pending()
                    if self.buffer.full:
                        self._flush(task.end, "aggregation")
        self.truncated = sch.truncated
        end = s.horizon_s if not math.isinf(s.horizon_s) else self.clock
        self._intervals_until(end, inclusive=True)
        self._train_pending()
        if self.buffer.buffer:
            self._flush(end, "final_flush", partial=True)
        if end > 0:
            self.clock = max(self.clock, end)
            self._record(end, "end")

    def _train_pending(self):
        if not self.pending:
            return
        jobs = [TrainJob(i, t.client_id, self.snapshots[t.base_version], t.base_version,
                         lr_at(self.hyper, t.base_version),
                         task_seed(self.seed, t.client_id, t.client_task_index))
                for i, t in enumerate(self.pending)]
        results = self.pool.run_batch(jobs)
        for t, r in zip(self.pending, results):
            if isinstance(r, TaskFailed):
                log.warning("task %d of client %s failed: %s", t.task_id, t.client_id, r)
                t.outcome = Outcome.INTERRUPTED
                self.counters.succeeded -= 1
                self.counters.interrupted += 1
                continue
            r.duration = t.duration
            self.buffer.add(r)
        self.pending = []

    def _flush(self, time, kind, partial=False):
        n = len(self.buffer.buffer)
        self.params = fedbuff_aggregate(self.buffer, self.params, self.hyper.server_lr,
                                        partial=partial)
        self.counters.updates_aggregated += n
        self.flush_times.append(time)
        v = self.params.version
        self.snapshots[v] = self.params.weights
        if not math.isinf(self.schedule.max_staleness):
            oldest = v - int(self.schedule.max_staleness)
            for old in [k for k in self.snapshots if k < oldest]:
                del self.snapshots[old]
        self._record(time, kind)
        every = self.schedule.checkpoint_every
        if kind == "aggregation" and every and v % every == 0:
            self._checkpoint()

    # ------------------------------------------------------------ sync

    def _run_sync(self):
        s = self.schedule
        c = self.counters
        stopped_early = False
        while s.max_rounds is None or self.rounds < s.max_rounds:
            plan = sync_round(self.index, self.clock, s.cohort_size, s.overcommit, s.deadline_s,
                              self.duration_fn, next_task_id=self.next_task_id,
                              client_tasks=dict(self.client_tasks), deadline_q=s.deadline_quantile)
            if plan is None:
                self.truncated = True
                break
            if plan.close_time > s.horizon_s:
                break
            for t in plan.selected:
                self.client_tasks[t.client_id] = t.client_task_index + 1
            self.next_task_id += len(plan.selected)
            self._intervals_until(plan.close_time)
            started = plan.started
            for t in started:
                self.index.mark_done(t.client_id, t.end)
            c.tasks_started += len(started)
            c.device_compute_s += sum(t.duration for t in started)
            c.interrupted += len(plan.interrupted)
            c.stale += len(plan.stragglers)
            self.clock = plan.close_time
            kind = "failed_round"
            if not plan.failed:
                ok = self._train_round(plan.aggregated)
                if ok:
                    self.params = fedavg_aggregate(ok, self.params, self.hyper.server_lr)
                    c.updates_aggregated += len(ok)
                    kind = "round"
            if kind == "failed_round":
                self.failed_rounds += 1
            self.rounds += 1
            self._record(self.clock, kind)
            every = s.checkpoint_every
            if every and self.rounds % every == 0:
                self._checkpoint()
        else:
            stopped_early = True
        end = self.clock if stopped_early or self.truncated or math.isinf(s.horizon_s) else s.horizon_s
        self._intervals_until(end, inclusive=True)
        if end > 0:
            self.clock = end
            self._record(end, "end")

    def _train_round(self, tasks):
        v = self.params.version
        jobs = [TrainJob(i, t.client_id, self.params.weights, v, lr_at(self.hyper, v),
                         task_seed(self.seed, t.client_id, t.client_task_index))
                for i, t in enumerate(tasks)]
        ok = []
        for t, r in zip(tasks, self.pool.run_batch(jobs)):
            self._last_client = t.client_id
            if isinstance(r, TaskFailed):
                log.warning("task %d of client %s failed: %s", t.task_id, t.client_id, r)
                t.outcome = Outcome.INTERRUPTED
                self.counters.interrupted += 1
                continue
            t.base_version = v
            r.duration = t.duration
            ok.append(r)
            self.counters.succeeded += 1
        return ok


def sessions_for(clients, start: float, end: float) -> list[AvailabilitySession]:
    """One always-on session per client (handy for small scenarios)."""
    return [AvailabilitySession(start, c, end) for c in clients]
