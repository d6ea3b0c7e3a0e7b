import json
import subprocess
import sys

import pytest

from fedsim import cli
from fedsim.engine import SimulationError
from fedsim.forecast import HOUR
from fedsim.trace import read_trace

TINY = """
[traces]
n_clients = 40
days = 1
sessions_per_day = 4.0
mean_duration_s = 1200.0

[data]
n_clients = 40
n_features = 6
avg_records = 20.0
max_records = 200
n_executors = 3

[devices]
base_mean_s = 3.0
base_std_s = 2.0

[model]
batch_size = 4

[schedule]
horizon_s = 86400.0
concurrency = 8
buffer_size = 4
cohort_size = 4

[seeds]
master = 5

[output]
workers = 0
"""


@pytest.fixture
def project(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(TINY)
    assert cli.main(["gen-traces", "-c", str(cfg)]) == 0
    assert cli.main(["gen-partitions", "-c", str(cfg)]) == 0
    return tmp_path, str(cfg)


def test_gen_traces_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text(TINY)
    digests = []
    for name in ("a.csv", "b.csv"):
        assert cli.main(["gen-traces", "-c", str(cfg), "-o", str(tmp_path / name)]) == 0
        out = capsys.readouterr().out
        digests.append(out.split("sha256 ")[1].strip())
        assert "all criteria                     100.0%" in out
    assert digests[0] == digests[1]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().startswith("client,start,end\n")
    assert read_trace(tmp_path / "a.csv")


def test_gen_traces_funnel(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[traces]\nn_clients = 5000\ndays = 1\n"
                   "[traces.criteria]\np_wifi = 0.70\np_battery = 0.34\nos_pass_rate = 0.93\n")
    assert cli.main(["gen-traces", "-c", str(cfg)]) == 0
    last = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("all criteria")][0]
    assert float(last.split()[-1].rstrip("%")) == pytest.approx(22.0, abs=1.0)


def test_run_writes_trials_and_manifest(project, capsys):
    root, cfg = project
    assert cli.main(["run", "-c", cfg, "-n", "2"]) == 0
    runs = root / "runs"
    for i in (0, 1):
        d = runs / f"trial-{i:03d}"
        assert (d / "metrics.ndjson").stat().st_size > 0
        assert (d / "model.bin").exists() and (d / "checkpoint.bin").exists()
    a = (runs / "trial-000" / "metrics.ndjson").read_bytes()
    b = (runs / "trial-001" / "metrics.ndjson").read_bytes()
    assert a != b  # trials use distinct derived seeds
    man = json.loads((runs / "manifest.json").read_text())
    assert len(man["artifacts"]["trials"]) == 2 and man["master_seed"] == 5
    summary = json.loads((runs / "summary.json").read_text())
    assert summary["summary"]["updates_per_s"]["lower"] <= summary["summary"]["updates_per_s"]["upper"]
    assert (runs / "bands.csv").read_text().startswith("metric,round,median,lower,upper,n_trials")
    assert "median updates_per_s" in capsys.readouterr().out


def test_run_is_reproducible_and_refuses_overwrite(project, capsys):
    root, cfg = project
    assert cli.main(["run", "-c", cfg, "-o", str(root / "x")]) == 0
    assert cli.main(["run", "-c", cfg, "-o", str(root / "y"), "--workers", "3"]) == 0
    fx, fy = (root / d / "trial-000" / "metrics.ndjson" for d in "xy")
    assert fx.read_bytes() == fy.read_bytes()
    assert (root / "x" / "summary.json").read_bytes() == (root / "y" / "summary.json").read_bytes()
    capsys.readouterr()
    assert cli.main(["run", "-c", cfg, "-o", str(root / "x")]) == 2
    assert "--resume" in capsys.readouterr().err
    assert cli.main(["run", "-c", cfg, "-o", str(root / "x"), "--resume"]) == 0
    assert fx.read_bytes() == fy.read_bytes()


def test_fedbuff_and_fedavg_report(project, capsys):
    root, cfg = project
    assert cli.main(["run", "-c", cfg, "--mode", "fedavg", "-o", str(root / "avg")]) == 0
    assert cli.main(["run", "-c", cfg, "--mode", "fedbuff", "-o", str(root / "buff")]) == 0
    capsys.readouterr()
    assert cli.main(["report", str(root / "avg"), str(root / "buff"),
                     "--json", str(root / "cmp.json")]) == 0
    res = json.loads((root / "cmp.json").read_text())
    assert res["target"] > 0 and "speedup" in res
    assert "speedup" in capsys.readouterr().out


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_forecast_scenario(tmp_path, capsys):
    # 610k aggregated updates over 48 virtual hours at 0.76 MB each
    rec = {"virtual_time_s": 48 * HOUR, "round": 61000, "loss": 0.3, "tasks_started": 650_000,
           "succeeded": 600_000, "interrupted": 40_000, "stale": 10_000,
           "device_compute_s": 25.9 * 86400, "updates_aggregated": 610_000, "kind": "end"}
    _write(tmp_path / "m.ndjson", [dict(rec, kind="aggregation"), rec])
    assert cli.main(["forecast", str(tmp_path / "m.ndjson"), "--update-mb", "0.76"]) == 0
    out = capsys.readouterr().out
    assert "3.53 updates/s" in out and "2.68 MB/s" in out and "25.900 d" in out


def test_forecast_single_task(tmp_path, capsys):
    rec = {"virtual_time_s": 100.0, "round": 1, "loss": 0.5, "tasks_started": 1, "succeeded": 1,
           "interrupted": 0, "stale": 0, "device_compute_s": 36.0, "kind": "end"}
    _write(tmp_path / "m.ndjson", [rec])
    assert cli.main(["forecast", str(tmp_path / "m.ndjson"), "--update-mb", "1",
                     "--json", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["trials"][0]["device_hours"] == 0.01


def test_forecast_two_trials_has_bands(tmp_path, capsys):
    for k, loss in enumerate((0.4, 0.6)):
        recs = [{"virtual_time_s": 50.0 * r, "round": r, "loss": loss / r, "tasks_started": r + 1,
                 "succeeded": r, "interrupted": 1, "stale": 0, "device_compute_s": 5.0 * r,
                 "kind": "aggregation"} for r in (1, 2)]
        _write(tmp_path / f"t{k}.ndjson", recs + [dict(recs[-1], kind="end")])
    assert cli.main(["forecast", str(tmp_path / "t0.ndjson"), str(tmp_path / "t1.ndjson"),
                     "--update-mb", "1", "--csv", str(tmp_path / "b.csv")]) == 0
    assert "median device_hours" in capsys.readouterr().out
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert "loss,1,0.5,0.4,0.6,2" in rows


def test_input_errors_exit_2(tmp_path, capsys):
    empty = tmp_path / "empty.ndjson"
    empty.write_text("")
    assert cli.main(["forecast", str(empty), "--update-mb", "1"]) == 2
    assert cli.main(["forecast", str(tmp_path / "nope.ndjson"), "--update-mb", "1"]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[schedule]\nspeed = 1\n")
    assert cli.main(["gen-traces", "-c", str(bad)]) == 2
    assert cli.main(["run", "-c", str(tmp_path / "missing.toml")]) == 2
    good = tmp_path / "good.toml"
    good.write_text(f'[traces]\npath = "{tmp_path / "none.csv"}"\n')
    assert cli.main(["run", "-c", str(good)]) == 2
    assert cli.main(["run", "-c", str(good), "-n", "0"]) == 2
    assert "error:" in capsys.readouterr().err


def test_aborted_simulation_exits_1(project, monkeypatch, capsys):
    root, cfg = project

    def boom(self, resume=False):
        raise SimulationError("aborted at virtual time 1.000, round 0, client 3: bad")
    monkeypatch.setattr(cli.Simulation, "run", boom)
    assert cli.main(["run", "-c", cfg]) == 1
    assert "client 3" in capsys.readouterr().err


def test_console_script_exit_code(tmp_path):
    empty = tmp_path / "empty.ndjson"
    empty.write_text("")
    proc = subprocess.run([sys.executable, "-m", "fedsim.cli", "forecast", str(empty),
                           "--update-mb", "1"], capture_output=True, text=True)
    assert proc.returncode == 2 and "error:" in proc.stderr
