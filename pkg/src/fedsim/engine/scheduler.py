"""Virtual-clock task scheduling.

``AsyncScheduler`` streams finished client tasks in end-time order using a
min-priority queue of START/END events; ``sync_round`` plans one
over-committed synchronous round. Neither touches model weights: task
timing depends only on traces, device profiles and seeds.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..trace import AvailabilityIndex, AvailabilitySession

END = 0  # sorts before START at equal times: frees capacity first
START = 1


class Outcome(str, Enum):
    PENDING = "pending"
    SUCCEEDED = "succeeded"
    INTERRUPTED = "interrupted"
    STALE = "stale"


class SchedulerInvariantError(AssertionError):
    pass


@dataclass(slots=True)
class ClientTask:
    task_id: int
    client_id: int
    session: AvailabilitySession
    start: float
    duration: float
    client_task_index: int = 0
    base_version: int = -1
    outcome: Outcome = Outcome.PENDING

    @property
    def end(self) -> float:
        return self.start + self.duration

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "client_id": self.client_id,
                "session": [self.session.start, self.session.end],
                "start": self.start, "duration": self.duration,
                "client_task_index": self.client_task_index,
                "base_version": self.base_version, "outcome": self.outcome.value}

    @classmethod
    def from_json(cls, d: dict) -> "ClientTask":
        s0, s1 = d["session"]
        return cls(d["task_id"], d["client_id"], AvailabilitySession(s0, d["client_id"], s1),
                   d["start"], d["duration"], d["client_task_index"], d["base_version"],
                   Outcome(d["outcome"]))


def task_duration(t: float, local_epochs: int, n_examples: int, update_mb: float,
                  bandwidth_mbps: float) -> float:
    """Per-example time x epochs x partition size, plus model download and upload."""
    if not t > 0:
        raise ValueError("per-example time must be > 0")
    if not bandwidth_mbps > 0:
        raise ValueError("bandwidth must be > 0")
    return t * local_epochs * n_examples + 2.0 * update_mb / bandwidth_mbps


def classify_outcome(task_end: float, session_end: float, staleness: int,
                     max_staleness: float) -> Outcome:
    if task_end > session_end:
        return Outcome.INTERRUPTED
    if staleness > max_staleness:
        return Outcome.STALE
    return Outcome.SUCCEEDED


class AsyncScheduler:
    """Priority-queue task scheduler for asynchronous training.

    Event keys are ``(time, END<START, client_id, task_id)``. A START pop
    raises the concurrency count ``c`` and creates the next task while
    ``c < C``; an END pop lowers ``c``, moves the clock to the task end,
    creates a task when ``c == C - 1`` and hands the task out. With
    ``uncapped_start=True`` START pops always create a task and ``c`` is not
    capped. Events later than ``horizon`` are never processed.
    """

    def __init__(self, index: AvailabilityIndex, duration_fn, concurrency: int,
                 horizon: float = math.inf, *, uncapped_start: bool = False,
                 advance_on_start: bool = False, check_invariants: bool = True,
                 prime: bool = True):
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.index = index
        self.duration_fn = duration_fn
        self.C = concurrency
        self.horizon = horizon
        self.uncapped_start = uncapped_start
        self.advance_on_start = advance_on_start
        self.check_invariants = check_invariants and not uncapped_start
        self.heap: list = []
        self.c = 0
        self.now = 0.0
        self.busy: set = set()
        self.client_tasks: dict = {}
        self.next_task_id = 0
        self.started = 0
        self.created = 0
        self.max_c = 0
        self.truncated = False
        self.finished = False
        if prime:
            self._create()

    def _create(self) -> None:
        got = self.index.next_available(self.now, self.busy)
        if got is None:
            return
        cid, sess = got
        k = self.client_tasks.get(cid, 0)
        self.client_tasks[cid] = k + 1
        dur = self.duration_fn(cid, k)
        task = ClientTask(self.next_task_id, cid, sess, sess.start, dur, k)
        self.next_task_id += 1
        self.created += 1
        self.busy.add(cid)
        heapq.heappush(self.heap, (task.start, START, cid, task.task_id, task))
        heapq.heappush(self.heap, (task.end, END, cid, task.task_id, task))

    def _check(self) -> None:
        if self.check_invariants and not 0 <= self.c <= self.C:
            raise SchedulerInvariantError(f"concurrency {self.c} outside [0, {self.C}]")

    def next_dispatch(self) -> ClientTask | None:
        """Process events until a task ends; None once the run is over."""
        while not self.finished:
            if not self.heap:
                self.truncated = self.now <= self.horizon
                self.finished = True
                break
            time, flag, cid, _, task = self.heap[0]
            if time > self.horizon:
                self.finished = True
                break
            heapq.heappop(self.heap)
            if flag == START:
                self.c += 1
                self.started += 1
                self.max_c = max(self.max_c, self.c)
                if self.advance_on_start and time > self.now:
                    self.now = time
                if self.uncapped_start or self.c < self.C:
                    self._create()
                self._check()
            else:
                self.c -= 1
                self.busy.discard(cid)
                self.index.mark_done(cid, task.end)
                # clock first: a task created now must not end before this one
                self.now = task.end
                if self.c == self.C - 1:
                    self._create()
                self._check()
                return task
        return None

    def __iter__(self):
        while (task := self.next_dispatch()) is not None:
            yield task

    @property
    def in_flight(self) -> int:
        return self.c

    def state(self) -> dict:
        seen = {}
        for time, flag, cid, tid, task in self.heap:
            seen[tid] = task
        return {
            "events": [[time, flag, cid, tid] for time, flag, cid, tid, _ in self.heap],
            "tasks": [t.to_json() for t in seen.values()],
            "c": self.c, "now": self.now, "busy": sorted(self.busy),
            "client_tasks": sorted(self.client_tasks.items()),
            "next_task_id": self.next_task_id, "started": self.started,
            "created": self.created, "max_c": self.max_c,
            "truncated": self.truncated, "finished": self.finished,
            "ready_at": sorted(self.index.ready_at.items()),
        }

    def restore(self, st: dict) -> None:
        tasks = {d["task_id"]: ClientTask.from_json(d) for d in st["tasks"]}
        self.heap = [(time, flag, cid, tid, tasks[tid]) for time, flag, cid, tid in st["events"]]
        heapq.heapify(self.heap)
        self.c = st["c"]
        self.now = st["now"]
        self.busy = set(st["busy"])
        self.client_tasks = dict((k, v) for k, v in st["client_tasks"])
        self.next_task_id = st["next_task_id"]
        self.started = st["started"]
        self.created = st["created"]
        self.max_c = st["max_c"]
        self.truncated = st["truncated"]
        self.finished = st["finished"]
        self.index.ready_at = dict((k, v) for k, v in st["ready_at"])


@dataclass
class RoundPlan:
    """Outcome of one synchronous round, before any training happens."""

    round_start: float
    deadline: float
    close_time: float
    selected: list
    aggregated: list = field(default_factory=list)
    stragglers: list = field(default_factory=list)
    interrupted: list = field(default_factory=list)
    not_started: list = field(default_factory=list)
    failed: bool = False

    @property
    def started(self) -> list:
        return [t for t in self.selected if t.start < self.close_time]


def default_deadline(offsets, q: float = 95.0) -> float:
    """Percentile ``q`` of projected completion offsets from round start."""
    return float(np.percentile(np.asarray(offsets, dtype=np.float64), q))


def sync_round(index: AvailabilityIndex, round_start: float, cohort_size: int,
               overcommit: float, deadline: float | None, duration_fn, *,
               next_task_id: int = 0, client_tasks: dict | None = None,
               deadline_q: float = 95.0) -> RoundPlan | None:
    """Select ceil(S * overcommit) clients at ``round_start`` and settle the round.

    Tasks that finish inside their session and before the deadline complete;
    the first ``cohort_size`` completions (by end time, then client id) are
    aggregated and the round closes at the last of them. With fewer
    completions the round fails and closes at the deadline. Selected clients
    whose session begins after the close never start. Returns None when no
    client can be selected.
    """
    if cohort_size < 1:
        raise ValueError("cohort_size must be >= 1")
    if overcommit < 1:
        raise ValueError("overcommit must be >= 1")
    client_tasks = {} if client_tasks is None else client_tasks
    want = math.ceil(cohort_size * overcommit - 1e-9)
    busy: set = set()
    tasks = []
    for _ in range(want):
        got = index.next_available(round_start, busy)
        if got is None:
            break
        cid, sess = got
        busy.add(cid)
        k = client_tasks.get(cid, 0)
        client_tasks[cid] = k + 1
        tasks.append(ClientTask(next_task_id, cid, sess, sess.start, duration_fn(cid, k), k))
        next_task_id += 1
    if not tasks:
        return None
    if deadline is None:
        deadline = default_deadline([t.end - round_start for t in tasks], deadline_q)
    limit = round_start + deadline
    interrupted = [t for t in tasks if t.end > t.session.end]
    done = sorted((t for t in tasks if t.end <= t.session.end and t.end <= limit),
                  key=lambda t: (t.end, t.client_id))
    if len(done) >= cohort_size:
        aggregated = done[:cohort_size]
        close = aggregated[-1].end
        failed = False
    else:
        aggregated = []
        close = limit
        failed = True
    not_started = [t for t in tasks if t.start >= close]
    started_ids = {t.task_id for t in tasks if t.start < close}
    agg_ids = {t.task_id for t in aggregated}
    plan = RoundPlan(round_start, deadline, close, tasks, aggregated)
    plan.not_started = not_started
    plan.interrupted = [t for t in interrupted if t.task_id in started_ids]
    int_ids = {t.task_id for t in plan.interrupted}
    plan.stragglers = [t for t in tasks if t.task_id in started_ids
                       and t.task_id not in agg_ids and t.task_id not in int_ids]
    plan.failed = failed
    for t in aggregated:
        t.outcome = Outcome.SUCCEEDED
    for t in plan.interrupted:
        t.outcome = Outcome.INTERRUPTED
    for t in plan.stragglers:
        t.outcome = Outcome.STALE
    return plan
