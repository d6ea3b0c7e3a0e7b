import json

import numpy as np
import pytest

from fedsim.engine.checkpoint import (CheckpointError, CheckpointMismatch, check_fingerprint,
                                      load_checkpoint, save_checkpoint)


class Killed(Exception):
    pass


def killer(kind_set, nth):
    seen = {"n": 0}

    def on_record(rec):
        if rec["kind"] in kind_set:
            seen["n"] += 1
            if seen["n"] == nth:
                raise Killed(rec["round"])
    return on_record


def _metrics(path):
    return (path / "metrics.ndjson").read_bytes()


def test_file_round_trip(tmp_path):
    p = tmp_path / "c.bin"
    arrays = {"weights": np.arange(5.0), "snapshot-000000000003": np.ones(2)}
    save_checkpoint(p, {"clock": 12.5, "nested": {"a": [1, 2]}}, arrays)
    header, back = load_checkpoint(p)
    assert header == {"clock": 12.5, "nested": {"a": [1, 2]}}
    assert set(back) == set(arrays)
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)
    assert not (tmp_path / "c.bin.tmp").exists()


def test_corrupt_files_rejected(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(b"FS")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"XXXX" + bytes(10))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    save_checkpoint(p, {}, {"w": np.zeros(10)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_fingerprint_check():
    check_fingerprint({"a": 1}, {"a": 1})
    with pytest.raises(CheckpointMismatch, match="data_digest"):
        check_fingerprint({"data_digest": "x"}, {"data_digest": "y"})


@pytest.mark.parametrize("mode,kinds", [("fedbuff", {"aggregation"}),
                                        ("fedavg", {"round", "failed_round"})])
def test_kill_and_resume_reproduces_run(tiny, tmp_path, mode, kinds):
    ref_dir = tmp_path / "ref"
    ref = tiny.run(out_dir=ref_dir, mode=mode)
    ref_bytes = _metrics(ref_dir)
    n_boundaries = sum(1 for r in ref.records if r["kind"] in kinds)
    assert n_boundaries >= 4
    for nth in sorted({2, n_boundaries // 2, n_boundaries}):
        out = tmp_path / f"kill-{nth}"
        sim, pool = tiny.simulation(out_dir=out, mode=mode, on_record=killer(kinds, nth))
        with pool, pytest.raises(Killed):
            sim.run()
        written = _metrics(out).count(b"\n")
        header, _ = load_checkpoint(out / "checkpoint.bin")
        # the checkpoint is at most one round behind the boundary that was killed
        killed_round = nth
        saved_round = header["version"] if mode == "fedbuff" else header["rounds"]
        assert killed_round - saved_round <= 1
        sim, pool = tiny.simulation(out_dir=out, mode=mode)
        with pool:
            res = sim.run(resume=True)
        assert _metrics(out) == ref_bytes
        assert np.array_equal(res.params.weights, ref.params.weights)
        assert res.params.version == ref.params.version
        recomputed = written - header["records_written"]
        assert recomputed <= sum(1 for r in ref.records[header["records_written"]:written])


def test_resume_after_crash_and_resume_again(tiny, tmp_path):
    ref = tiny.run(out_dir=tmp_path / "ref")
    out = tmp_path / "run"
    for nth in (3, 6):
        sim, pool = tiny.simulation(out_dir=out, on_record=killer({"aggregation"}, nth))
        with pool, pytest.raises(Killed):
            sim.run(resume=True)
    sim, pool = tiny.simulation(out_dir=out)
    with pool:
        sim.run(resume=True)
    assert _metrics(out) == _metrics(tmp_path / "ref")


def test_resume_refuses_changed_data(tiny, tmp_path):
    sim, pool = tiny.simulation(out_dir=tmp_path, on_record=killer({"aggregation"}, 3))
    with pool, pytest.raises(Killed):
        sim.run()
    sim, pool = tiny.simulation(out_dir=tmp_path)
    sim.data_digest = "altered"
    with pool, pytest.raises(CheckpointMismatch, match="data_digest"):
        sim.run(resume=True)
    sim, pool = tiny.simulation(out_dir=tmp_path, buffer_size=4)
    with pool, pytest.raises(CheckpointMismatch, match="schedule"):
        sim.run(resume=True)


def test_fresh_run_discards_old_state(tiny, tmp_path):
    sim, pool = tiny.simulation(out_dir=tmp_path, on_record=killer({"aggregation"}, 3))
    with pool, pytest.raises(Killed):
        sim.run()
    assert (tmp_path / "checkpoint.bin").exists()
    res = tiny.run(out_dir=tmp_path, checkpoint_every=0)
    assert not (tmp_path / "checkpoint.bin").exists()
    lines = _metrics(tmp_path).decode().splitlines()
    assert [json.loads(x) for x in lines] == res.records
