"""Run configuration: one TOML file, defaults, ``--set`` overrides and builders."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SyntheticTabularConfig
from .devices import BandwidthModel, DevicePopulation, DeviceProfile, default_population
from .engine.simulation import ScheduleConfig
from .model import Architecture, HyperParams, update_size_bytes
from .trace import CriteriaModel, DiurnalTraceConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "traces": {
        "path": "traces.csv",
        "source": "synthetic",  # or "raw"
        "raw_log": "",
        "short_gap_max": 30.0,
        "long_gap_min": 300.0,
        "n_clients": 1000,
        "days": 7,
        "sessions_per_day": 4.0,
        "mean_duration_s": 900.0,
        "duration_sigma": 1.0,
        "activity_sigma": 0.5,
        "trough": 0.15,
        "trough_hour": 4.0,
        "noise": 0.03,
        "criteria": {"p_wifi": 1.0, "p_battery": 1.0, "os_pass_rate": 1.0},
    },
    "data": {
        "source": "synthetic",  # or "csv"
        "csv_path": "",
        "label": "label",
        "client": "client",
        "group": "",
        "n_clients": 1000,
        "n_features": 16,
        "avg_records": 99.0,
        "zipf_a": 2.0,
        "max_records": 5000,
        "positive_ratio": 0.28,
        "label_noise": 0.02,
        "client_shift": 0.3,
        "relevance_levels": 0,
        "group_size": 0,
        "partition": "natural",  # or "dirichlet"
        "dirichlet_clients": 1000,
        "alpha_label": 1.0,
        "alpha_quantity": 1.0,
        "test_fraction": 0.2,
        "n_executors": 4,
        "shard_dir": "shards",
        "lookback_days": 0.0,
        "ndcg_k": 10,
    },
    "devices": {
        "base_mean_s": 61.81 / 5000,
        "base_std_s": 44.17 / 5000,
        "sigma": 0.0,  # > 0: lognormal tiers with this log-scale spread
        "bandwidth_mu": math.log(2.5),
        "bandwidth_sigma": 0.8,
        "profiles": [],
    },
    "model": {
        "kind": "logreg",
        "hidden": 0,
        "activation": "tanh",
        "local_epochs": 1,
        "batch_size": 16,
        "lr0": 0.1,
        "lr_decay_rate": 1.0,
        "lr_decay_steps": 1.0,
        "server_lr": 1.0,
        "encoding": "float32",
        "update_mb": 0.0,  # > 0 overrides the computed update size
    },
    "schedule": {
        "mode": "fedbuff",
        "horizon_s": 86400.0,
        "concurrency": 100,
        "buffer_size": 10,
        "max_staleness": 10,
        "staleness_exponent": 0.5,
        "cohort_size": 10,
        "overcommit": 1.3,
        "deadline_s": 0.0,  # 0: percentile of projected durations
        "deadline_quantile": 95.0,
        "max_rounds": 0,  # 0: until the horizon
        "eval_interval_s": 0.0,
        "checkpoint_every": 1,
        "uncapped_start": False,
        "advance_on_start": False,
        "cooldown_s": 0.0,
    },
    "seeds": {"master": 1},
    "output": {"dir": "runs", "workers": 1, "csv": True},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and k != "criteria":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list, object]:
    """``section.key=value``; the value is read as TOML, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not section.key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if len(path) < 2:
        raise ConfigError(f"override key {key!r} needs a section")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return path, value


def load_config(path=None, overrides=()) -> dict:
    raw = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base_dir = path.resolve().parent
    cfg = _merge(DEFAULTS, raw)
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config section in {text!r}")
            node = node[k]
        if keys[-1] not in node and keys[-2] != "criteria":
            raise ConfigError(f"unknown config key {'.'.join(keys)}")
        node[keys[-1]] = value
    cfg["_base_dir"] = str(base_dir)
    return cfg


def config_digest(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


def resolve(cfg: dict, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


# ------------------------------------------------------------------ builders

def criteria_from(cfg: dict) -> CriteriaModel:
    return CriteriaModel.from_config(cfg["traces"]["criteria"])


def trace_config_from(cfg: dict) -> DiurnalTraceConfig:
    t = cfg["traces"]
    return DiurnalTraceConfig(n_clients=int(t["n_clients"]), days=int(t["days"]),
                              sessions_per_day=t["sessions_per_day"],
                              mean_duration_s=t["mean_duration_s"],
                              duration_sigma=t["duration_sigma"],
                              activity_sigma=t["activity_sigma"], trough=t["trough"],
                              trough_hour=t["trough_hour"], noise=t["noise"])


def data_config_from(cfg: dict) -> SyntheticTabularConfig:
    d = cfg["data"]
    return SyntheticTabularConfig(n_clients=int(d["n_clients"]), n_features=int(d["n_features"]),
                                  avg_records=d["avg_records"], zipf_a=d["zipf_a"],
                                  max_records=int(d["max_records"]),
                                  positive_ratio=d["positive_ratio"],
                                  label_noise=d["label_noise"], client_shift=d["client_shift"],
                                  relevance_levels=int(d["relevance_levels"]),
                                  group_size=int(d["group_size"]))


def arch_from(cfg: dict) -> Architecture:
    m = cfg["model"]
    return Architecture(m["kind"], int(cfg["data"]["n_features"]), int(m["hidden"]),
                        m["activation"])


def hyper_from(cfg: dict) -> HyperParams:
    m = cfg["model"]
    return HyperParams(int(m["local_epochs"]), int(m["batch_size"]), m["lr0"],
                       m["lr_decay_rate"], m["lr_decay_steps"], m["server_lr"])


def update_mb_from(cfg: dict) -> float:
    m = cfg["model"]
    if m["update_mb"] > 0:
        return float(m["update_mb"])
    return update_size_bytes(arch_from(cfg).n_params, m["encoding"]) / 1e6


def schedule_from(cfg: dict, mode: str | None = None) -> ScheduleConfig:
    s = dict(cfg["schedule"])
    if mode is not None:
        s["mode"] = mode
    return ScheduleConfig(
        mode=s["mode"], horizon_s=float(s["horizon_s"]), concurrency=int(s["concurrency"]),
        buffer_size=int(s["buffer_size"]), max_staleness=float(s["max_staleness"]),
        staleness_exponent=float(s["staleness_exponent"]), cohort_size=int(s["cohort_size"]),
        overcommit=float(s["overcommit"]),
        deadline_s=float(s["deadline_s"]) if s["deadline_s"] > 0 else None,
        deadline_quantile=float(s["deadline_quantile"]),
        max_rounds=int(s["max_rounds"]) if s["max_rounds"] > 0 else None,
        eval_interval_s=float(s["eval_interval_s"]), checkpoint_every=int(s["checkpoint_every"]),
        uncapped_start=bool(s["uncapped_start"]), advance_on_start=bool(s["advance_on_start"]),
        cooldown_s=float(s["cooldown_s"]))


def population_from(cfg: dict) -> DevicePopulation:
    d = cfg["devices"]
    if not d["profiles"]:
        return default_population(d["base_mean_s"], d["base_std_s"], d["sigma"] or None)
    profiles, shares = {}, {}
    for p in d["profiles"]:
        name = p["name"]
        profiles[name] = DeviceProfile(name, p.get("mean_s", 0.0), p.get("std_s", 0.0),
                                       p.get("dist", "lognormal"), p.get("samples"),
                                       p.get("max_cpu_pct", float("nan")))
        shares[name] = p["share"]
    return DevicePopulation(profiles, shares)


def bandwidth_from(cfg: dict) -> BandwidthModel:
    d = cfg["devices"]
    return BandwidthModel(d["bandwidth_mu"], d["bandwidth_sigma"])
