import numpy as np
import pytest

from fedsim.data import (ClientPartition, SyntheticTabularConfig, holdout_mask,
                         partition_dirichlet, round_robin_shard, synthetic_tabular)
from fedsim.devices import DevicePopulation, DeviceProfile
from fedsim.engine import EvalSet, ScheduleConfig, Simulation, WorkerPool
from fedsim.model import Architecture, HyperParams
from fedsim.trace import AvailabilitySession

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


class TinyWorld:
    """Small deterministic scenario shared by engine and CLI tests."""

    def __init__(self, n_clients=30, n_features=6, seed=3):
        X, y, keys, _ = synthetic_tabular(
            SyntheticTabularConfig(n_clients=n_clients, n_features=n_features, avg_records=20,
                                   max_records=200), seed)
        test = holdout_mask(len(y), 0.25, seed + 1)
        self.parts = partition_dirichlet(X[~test], y[~test], n_clients, 1.0, 5.0, seed + 2)
        self.shards = round_robin_shard(self.parts, 4)
        self.eval_set = EvalSet(X[test], y[test])
        self.arch = Architecture("logreg", n_features)
        self.hyper = HyperParams(local_epochs=2, batch_size=4, lr0=0.1)
        rng = np.random.default_rng(seed + 3)
        self.sessions = []
        for c in range(n_clients):
            t = float(rng.integers(0, 200))
            for _ in range(3):
                length = float(rng.integers(200, 2000))
                self.sessions.append(AvailabilitySession(t, c, t + length))
                t += length + float(rng.integers(50, 500))
        self.population = DevicePopulation({"dev": DeviceProfile.lognormal("dev", 0.5, 1.0)},
                                           {"dev": 1.0})

    def simulation(self, workers=0, out_dir=None, crash_plan=None, on_record=None, seed=7,
                   **schedule):
        opts = dict(mode="fedbuff", horizon_s=1500.0, concurrency=6, buffer_size=3,
                    max_staleness=4, cohort_size=4, overcommit=1.5, eval_interval_s=400.0,
                    checkpoint_every=1)
        opts.update(schedule)
        pool = WorkerPool(self.shards, self.arch, self.hyper, n_workers=workers,
                          crash_plan=crash_plan)
        sim = Simulation(sessions=self.sessions, pool=pool, arch=self.arch, hyper=self.hyper,
                         schedule=ScheduleConfig(**opts), eval_set=self.eval_set, seed=seed,
                         population=self.population, update_mb=0.05, out_dir=out_dir,
                         data_digest="tiny", on_record=on_record)
        return sim, pool

    def run(self, **kw):
        sim, pool = self.simulation(**kw)
        with pool:
            return sim.run()


@pytest.fixture(scope="session")
def tiny():
    return TinyWorld()


def one_client(X, y, cid=0):
    return ClientPartition(cid, np.asarray(X, dtype=float), np.asarray(y, dtype=float))


def random_instance(rng, max_clients=50, integer_times=False):
    """Random sessions plus a memoised duration table keyed by (client, task index)."""
    n = int(rng.integers(1, max_clients + 1))
    sessions = []
    for c in range(n):
        t = float(rng.integers(0, 300)) if integer_times else float(rng.uniform(0, 300))
        for _ in range(int(rng.integers(1, 4))):
            length = float(rng.integers(5, 200)) if integer_times else float(rng.uniform(5, 200))
            sessions.append(AvailabilitySession(t, c, t + length))
            t += length + float(rng.integers(0, 100))
    table = {}
    seed = int(rng.integers(2 ** 31))

    def duration(cid, k):
        if (cid, k) not in table:
            r = np.random.default_rng([seed, cid, k])
            table[cid, k] = float(r.integers(1, 60)) if integer_times else float(r.lognormal(2.5, 1.0))
        return table[cid, k]

    return sessions, duration
