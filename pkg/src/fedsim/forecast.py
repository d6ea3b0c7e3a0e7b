"""Resource projections from simulation metric streams.

Everything here is post-processing over plain records, so it runs on
metric files long after the simulation that wrote them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

HOUR = 3600.0
DAY = 86400.0
AGGREGATION_KINDS = ("aggregation", "round")


@dataclass
class SystemMetrics:
    tasks_started: int = 0
    succeeded: int = 0
    interrupted: int = 0
    stale: int = 0
    device_compute_s: float = 0.0
    updates_aggregated: int = 0
    virtual_wall_s: float = 0.0

    def check(self) -> None:
        counts = (self.tasks_started, self.succeeded, self.interrupted, self.stale,
                  self.updates_aggregated)
        if min(counts) < 0 or self.device_compute_s < 0 or self.virtual_wall_s < 0:
            raise ValueError(f"negative counter in {self}")
        if self.tasks_started < self.succeeded + self.interrupted + self.stale:
            raise ValueError("more classified tasks than started tasks")

    @property
    def attempted(self) -> int:
        """Updates that reached the aggregator, including ones rejected as stale."""
        return self.succeeded + self.stale

    @classmethod
    def from_record(cls, rec: dict) -> "SystemMetrics":
        return cls(rec["tasks_started"], rec["succeeded"], rec["interrupted"], rec["stale"],
                   rec["device_compute_s"], rec.get("updates_aggregated", 0),
                   rec["virtual_time_s"])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrialSummary:
    metric: str
    round: int
    median: float
    lower: float
    upper: float
    n_trials: int


def total_device_time(tasks) -> float:
    """Sum of task durations in hours; accepts tasks with ``.duration`` or plain seconds."""
    total = 0.0
    for t in tasks:
        total += float(getattr(t, "duration", t))
    return total / HOUR


def update_rate(metrics: SystemMetrics) -> float:
    if not metrics.virtual_wall_s > 0:
        raise ValueError("virtual wall time must be > 0")
    return metrics.attempted / metrics.virtual_wall_s


def aggregator_bandwidth(metrics: SystemMetrics, update_mb: float) -> float:
    """Ingest bandwidth in MB/s the aggregator must sustain."""
    return update_rate(metrics) * update_mb


def flush_times_from_arrivals(arrivals, buffer_size: int) -> np.ndarray:
    """Times at which every ``buffer_size``-th arrival fills the buffer."""
    a = np.sort(np.asarray(arrivals, dtype=np.float64))
    return a[buffer_size - 1::buffer_size]


def buffer_fill_durations(timestamps, buffer_size: int, start: float | None = None) -> dict:
    """Summary of the time between consecutive flushes.

    With ``start`` set, the first fill is measured from it instead of being
    dropped.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    if start is not None:
        ts = np.concatenate([[start], ts])
    if ts.size < 2:
        raise ValueError("need at least two aggregations")
    d = np.diff(ts)
    if np.any(d < 0):
        raise ValueError("aggregation timestamps must be non-decreasing")
    p50, p90, p99 = np.percentile(d, [50, 90, 99])
    return {"buffer_size": buffer_size, "n_fills": int(d.size), "mean_s": float(d.mean()),
            "p50_s": float(p50), "p90_s": float(p90), "p99_s": float(p99),
            "min_s": float(d.min()), "max_s": float(d.max())}


def _values(stream, metric):
    if len(stream) and isinstance(stream[0], dict):
        return [r["round"] for r in stream], [float(r[metric]) for r in stream]
    return list(range(len(stream))), [float(v) for v in stream]


def error_bounded(streams, metric: str = "loss", percentiles: tuple | None = None) -> list:
    """Per-round median and bounds across trials.

    ``streams`` holds one sequence per trial, either plain values or metric
    records carrying ``round`` and ``metric``. Bounds are min/max unless
    ``percentiles=(lo, hi)`` is given.
    """
    if len(streams) < 2:
        raise ValueError("need at least two trials")
    rounds = None
    table = []
    for s in streams:
        r, v = _values(s, metric)
        if rounds is None:
            rounds = r
        elif r != rounds:
            raise ValueError("trial streams are not aligned on round index")
        table.append(v)
    m = np.asarray(table, dtype=np.float64)
    med = np.median(m, axis=0)
    if percentiles is None:
        lo, hi = m.min(axis=0), m.max(axis=0)
    else:
        lo, hi = np.percentile(m, list(percentiles), axis=0)
    return [TrialSummary(metric, rounds[i], float(med[i]), float(lo[i]), float(hi[i]), len(streams))
            for i in range(len(rounds))]


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    if not records:
        raise ValueError(f"{path}: empty metric stream")
    return records


def aggregation_records(records) -> list[dict]:
    return [r for r in records if r.get("kind") in AGGREGATION_KINDS]


def _quality_key(records) -> str | None:
    for key in ("aupr", "ndcg"):
        if any(key in r for r in records):
            return key
    return None


def trial_forecast(records, update_mb: float, buffer_size: int | None = None) -> dict:
    last = records[-1]
    m = SystemMetrics.from_record(last)
    out = {"virtual_hours": m.virtual_wall_s / HOUR, "tasks_started": m.tasks_started,
           "succeeded": m.succeeded, "interrupted": m.interrupted, "stale": m.stale,
           "device_hours": m.device_compute_s / HOUR, "device_days": m.device_compute_s / DAY,
           "updates_per_s": 0.0, "mb_per_s": 0.0}
    if m.virtual_wall_s > 0:
        out["updates_per_s"] = update_rate(m)
        out["mb_per_s"] = aggregator_bandwidth(m, update_mb)
    stamps = [r["virtual_time_s"] for r in aggregation_records(records)]
    if len(stamps) >= 2:
        out["buffer_fill"] = buffer_fill_durations(stamps, buffer_size or 0)
    return out


def forecast_report(streams, update_mb: float, buffer_size: int | None = None) -> dict:
    """Device time, ingest rate and bandwidth per trial, with bands over trials."""
    if not streams:
        raise ValueError("no metric streams")
    trials = [trial_forecast(s, update_mb, buffer_size) for s in streams]
    report = {"update_mb": update_mb, "n_trials": len(trials), "trials": trials}
    if len(trials) >= 2:
        summary = {}
        for key in ("device_hours", "updates_per_s", "mb_per_s", "virtual_hours"):
            (s,) = error_bounded([[t[key]] for t in trials], key)
            summary[key] = {"median": s.median, "lower": s.lower, "upper": s.upper}
        report["summary"] = summary
        aggs = [aggregation_records(s) for s in streams]
        common = set.intersection(*({r["round"] for r in a} for a in aggs))
        aligned = [[r for r in a if r["round"] in common] for a in aggs]
        bands = {}
        metrics = ["loss"] + [k for k in [_quality_key(aligned[0])] if k]
        if common:
            for key in metrics:
                bands[key] = [asdict(s) for s in error_bounded(aligned, key)]
        report["bands"] = bands
    return report


def format_report(report: dict) -> str:
    lines = [f"update size            {report['update_mb']:.4f} MB"]
    for i, t in enumerate(report["trials"]):
        lines.append(f"trial {i}: device time {t['device_hours']:.3f} h ({t['device_days']:.3f} d), "
                     f"{t['updates_per_s']:.2f} updates/s, {t['mb_per_s']:.2f} MB/s")
        if "buffer_fill" in t:
            b = t["buffer_fill"]
            lines.append(f"  buffer fill mean {b['mean_s']:.2f} s, p90 {b['p90_s']:.2f} s "
                         f"over {b['n_fills']} fills")
    for key, s in report.get("summary", {}).items():
        lines.append(f"median {key} {s['median']:.4f} [{s['lower']:.4f}, {s['upper']:.4f}]")
    return "\n".join(lines)


def write_bands_csv(report: dict, path) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "round", "median", "lower", "upper", "n_trials"])
        for key, rows in report.get("bands", {}).items():
            for r in rows:
                w.writerow([key, r["round"], r["median"], r["lower"], r["upper"], r["n_trials"]])


def time_to_target(records, target: float, metric: str = "loss") -> float:
    """Virtual time of the first aggregation reaching ``target`` (inf if never).

    Loss targets are reached from above; any other metric from below.
    """
    for r in aggregation_records(records):
        v = r[metric]
        if (v <= target) if metric == "loss" else (v >= target):
            return float(r["virtual_time_s"])
    return math.inf


def achievable_target(streams, metric: str = "loss") -> float:
    """Least demanding best value over trials: every trial reaches it."""
    best = []
    for s in streams:
        vals = [r[metric] for r in aggregation_records(s)]
        if not vals:
            raise ValueError("trial without aggregations")
        best.append(min(vals) if metric == "loss" else max(vals))
    return max(best) if metric == "loss" else min(best)


def speedup(baseline_streams, candidate_streams, metric: str = "loss") -> dict:
    """Median time-to-target ratio, with the target set by the baseline trials."""
    target = achievable_target(baseline_streams, metric)
    tb = [time_to_target(s, target, metric) for s in baseline_streams]
    tc = [time_to_target(s, target, metric) for s in candidate_streams]
    mb, mc = float(np.median(tb)), float(np.median(tc))
    return {"metric": metric, "target": target, "baseline_times_s": tb, "candidate_times_s": tc,
            "baseline_median_s": mb, "candidate_median_s": mc,
            "speedup": mb / mc if mc > 0 else math.inf}
