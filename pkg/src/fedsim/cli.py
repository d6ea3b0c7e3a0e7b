"""Command-line entry point.

Exit codes: 0 success, 1 simulation aborted, 2 input or configuration error.
Set FEDSIM_LOG (e.g. ``debug``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, arch_from, bandwidth_from, config_digest, criteria_from,
                     data_config_from, hyper_from, load_config, population_from, resolve,
                     schedule_from, trace_config_from, update_mb_from)
from .data import (ClientPartition, DataError, ExecutorShard, ShardReader, compute_stats,
                   file_digest, holdout_mask, partition_dirichlet, partition_natural,
                   read_records_csv, round_robin_shard, shards_digest, synthetic_tabular,
                   write_shard, write_shards)
from .engine import CheckpointError, EvalSet, Simulation, SimulationError, WorkerPool
from .engine.simulation import CHECKPOINT_FILE, METRICS_FILE
from .forecast import (format_report, forecast_report, read_metrics, speedup, write_bands_csv)
from .model import save_weights
from .rng import derive_seed, trial_seed
from .trace import (AvailabilitySession, TraceError, criteria_funnel, read_raw_log, read_trace,
                    split_sessions, synthetic_sessions, write_trace)

log = logging.getLogger("fedsim")

TEST_SET_FILE = "test-set.bin"
STATS_FILE = "stats.json"


class InputError(Exception):
    pass


def _config(args):
    return load_config(args.config, args.set or [])


def _integer_seconds(sessions):
    """Shrink sessions to whole seconds; sessions shorter than that vanish."""
    out = []
    for s in sessions:
        a, b = math.ceil(s.start), math.floor(s.end)
        if b > a:
            out.append(AvailabilitySession(a, s.client_id, b))
    return out


def cmd_gen_traces(args) -> int:
    cfg = _config(args)
    t = cfg["traces"]
    master = cfg["seeds"]["master"]
    if t["source"] == "synthetic":
        sessions = synthetic_sessions(trace_config_from(cfg), derive_seed(master, "traces"))
    elif t["source"] == "raw":
        sessions = []
        for raw in read_raw_log(resolve(cfg, t["raw_log"])):
            sessions += split_sessions(raw, t["short_gap_max"], t["long_gap_min"])
        sessions = _integer_seconds(sessions)
    else:
        raise InputError(f"unknown trace source {t['source']!r}")
    funnel = criteria_funnel(sessions, criteria_from(cfg), derive_seed(master, "criteria"))
    out = Path(args.out) if args.out else resolve(cfg, t["path"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(out, funnel.kept)
    print(funnel.table())
    print(f"wrote {len(funnel.kept)} of {funnel.n_sessions} sessions to {out}")
    print(f"sha256 {file_digest(out)}")
    return 0


def _load_records(cfg):
    d = cfg["data"]
    master = cfg["seeds"]["master"]
    if d["source"] == "synthetic":
        return synthetic_tabular(data_config_from(cfg), derive_seed(master, "data"))
    if d["source"] == "csv":
        return read_records_csv(resolve(cfg, d["csv_path"]), int(d["n_features"]), d["label"],
                                d["client"], d["group"] or None)
    raise InputError(f"unknown data source {d['source']!r}")


def cmd_gen_partitions(args) -> int:
    cfg = _config(args)
    d = cfg["data"]
    master = cfg["seeds"]["master"]
    X, y, keys, groups = _load_records(cfg)
    test = holdout_mask(len(y), d["test_fraction"], derive_seed(master, "holdout"))
    train = ~test
    g_train = groups[train] if groups is not None else None
    if d["partition"] == "natural":
        parts = partition_natural(X[train], y[train], np.asarray(keys, dtype=object)[train], g_train)
    elif d["partition"] == "dirichlet":
        parts = partition_dirichlet(X[train], y[train], int(d["dirichlet_clients"]),
                                    d["alpha_label"], d["alpha_quantity"],
                                    derive_seed(master, "dirichlet"), g_train)
    else:
        raise InputError(f"unknown partition scheme {d['partition']!r}")
    out_dir = Path(args.out) if args.out else resolve(cfg, d["shard_dir"])
    paths = write_shards(out_dir, round_robin_shard(parts, int(d["n_executors"])))
    if test.any():
        g_test = groups[test] if groups is not None else None
        write_shard(out_dir / TEST_SET_FILE,
                    ExecutorShard(0, [ClientPartition(0, X[test], y[test], g_test)]))
    stats = compute_stats(parts, d["lookback_days"] or None)
    (out_dir / STATS_FILE).write_text(stats.to_json() + "\n")
    print(stats.to_json())
    print(f"wrote {len(paths)} shards to {out_dir}")
    return 0


def _shard_paths(cfg):
    shard_dir = resolve(cfg, cfg["data"]["shard_dir"])
    paths = sorted(shard_dir.glob("shard-*.bin"))
    if not paths:
        raise InputError(f"no shard files in {shard_dir}; run gen-partitions first")
    test_path = shard_dir / TEST_SET_FILE
    if not test_path.exists():
        raise InputError(f"missing test set {test_path}")
    return paths, test_path


def _eval_set(cfg, test_path):
    p = ShardReader(test_path).load_all().partitions[0]
    return EvalSet(p.X, p.y, p.groups, int(cfg["data"]["ndcg_k"]))


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.workers is not None:
        cfg["output"]["workers"] = args.workers
    schedule = schedule_from(cfg, args.mode)
    trace_path = resolve(cfg, cfg["traces"]["path"])
    if not trace_path.exists():
        raise InputError(f"missing trace file {trace_path}; run gen-traces first")
    sessions = read_trace(trace_path)
    paths, test_path = _shard_paths(cfg)
    digest = shards_digest(paths + [test_path])
    eval_set = _eval_set(cfg, test_path)
    out_root = Path(args.out) if args.out else resolve(cfg, cfg["output"]["dir"])
    master = cfg["seeds"]["master"]
    arch, hyper = arch_from(cfg), hyper_from(cfg)
    update_mb = update_mb_from(cfg)
    trial_dirs = [out_root / f"trial-{i:03d}" for i in range(args.trials)]
    if not args.resume:
        for d in trial_dirs:
            if (d / CHECKPOINT_FILE).exists():
                raise InputError(f"{d / CHECKPOINT_FILE} exists; pass --resume to continue "
                                 f"or remove the directory")
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = {"tool_version": __version__, "config_digest": config_digest(cfg),
                "master_seed": master, "mode": schedule.mode,
                "created_at": datetime.now(timezone.utc).isoformat(),
                "artifacts": {"traces": {"path": str(trace_path), "sha256": file_digest(trace_path)},
                              "shards": {"paths": [str(p) for p in paths], "sha256": digest},
                              "trials": []}}
    streams = []
    for i, d in enumerate(trial_dirs):
        seed = trial_seed(master, i)
        with WorkerPool(paths, arch, hyper, n_workers=int(cfg["output"]["workers"])) as pool:
            sim = Simulation(sessions=sessions, pool=pool, arch=arch, hyper=hyper,
                             schedule=schedule, eval_set=eval_set, seed=seed,
                             population=population_from(cfg), bandwidth=bandwidth_from(cfg),
                             update_mb=update_mb, out_dir=d, data_digest=digest)
            res = sim.run(resume=args.resume)
        save_weights(d / "model.bin", res.params)
        streams.append(res.records)
        manifest["artifacts"]["trials"].append(
            {"trial": i, "seed": seed, "metrics": str(d / METRICS_FILE),
             "checkpoint": str(d / CHECKPOINT_FILE), "model": str(d / "model.bin")})
        log.info("trial %d: %d records, version %d", i, len(res.records), res.params.version)
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    nonempty = [s for s in streams if s]
    if nonempty:
        k = schedule.buffer_size if schedule.mode == "fedbuff" else None
        report = forecast_report(nonempty, update_mb, k)
        (out_root / "summary.json").write_text(json.dumps(report, indent=2) + "\n")
        if cfg["output"]["csv"] and "bands" in report:
            write_bands_csv(report, out_root / "bands.csv")
        print(format_report(report))
    return 0


def _metric_files(items):
    files = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            files += sorted(p.glob(f"trial-*/{METRICS_FILE}")) or sorted(p.glob(METRICS_FILE))
        else:
            files.append(p)
    if not files:
        raise InputError(f"no metric files under {', '.join(items)}")
    return files


def _read_streams(items):
    out = []
    for f in _metric_files(items):
        try:
            out.append(read_metrics(f))
        except OSError as exc:
            raise InputError(str(exc)) from exc
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    return out


def cmd_forecast(args) -> int:
    streams = _read_streams(args.metrics)
    report = forecast_report(streams, args.update_mb, args.buffer_size)
    print(format_report(report))
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n")
    if args.csv:
        write_bands_csv(report, args.csv)
    return 0


def cmd_report(args) -> int:
    """Compare a baseline run against a candidate on time to the baseline's target."""
    base = _read_streams([args.baseline])
    cand = _read_streams([args.candidate])
    res = speedup(base, cand, args.metric)
    print(f"target {res['metric']} {res['target']:.6f}")
    print(f"baseline median time to target  {res['baseline_median_s']:.1f} s")
    print(f"candidate median time to target {res['candidate_median_s']:.1f} s")
    print(f"speedup {res['speedup']:.2f}x")
    if args.json:
        Path(args.json).write_text(json.dumps(res, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="TOML run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    sp = sub.add_parser("gen-traces", help="write an availability trace file")
    with_config(sp)
    sp.add_argument("-o", "--out", help="trace file (default: traces.path)")
    sp.set_defaults(func=cmd_gen_traces)

    sp = sub.add_parser("gen-partitions", help="partition records into executor shards")
    with_config(sp)
    sp.add_argument("-o", "--out", help="shard directory (default: data.shard_dir)")
    sp.set_defaults(func=cmd_gen_partitions)

    sp = sub.add_parser("run", help="run seeded simulation trials")
    with_config(sp)
    sp.add_argument("-n", "--trials", type=int, default=1)
    sp.add_argument("--mode", choices=["fedavg", "fedbuff"])
    sp.add_argument("--workers", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from trial checkpoints")
    sp.add_argument("-o", "--out", help="output directory (default: output.dir)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("forecast", help="resource forecast from metric files")
    sp.add_argument("metrics", nargs="+", help="metric files or run directories")
    sp.add_argument("--update-mb", type=float, required=True, help="update size M in MB")
    sp.add_argument("--buffer-size", type=int)
    sp.add_argument("--json", help="also write the report as JSON")
    sp.add_argument("--csv", help="write per-round trial bands as CSV")
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("report", help="time-to-target comparison of two runs")
    sp.add_argument("baseline", help="run directory or metric file")
    sp.add_argument("candidate", help="run directory or metric file")
    sp.add_argument("--metric", default="loss")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get("FEDSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "trials", 1) < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InputError, ConfigError, DataError, TraceError, CheckpointError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
