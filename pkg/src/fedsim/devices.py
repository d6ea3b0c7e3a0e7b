"""Device compute profiles, network bandwidth, and the client-to-device mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_RESAMPLE = 100


class SampleError(ValueError):
    pass


def _positive_draw(draw, what: str) -> float:
    for _ in range(MAX_RESAMPLE):
        v = float(draw())
        if v > 0 and math.isfinite(v):
            return v
    raise SampleError(f"{what}: no positive sample after {MAX_RESAMPLE} draws")


@dataclass
class DeviceProfile:
    """Per-example training time of one device model, in seconds.

    ``dist`` is ``"lognormal"`` (moment-matched to mean/std), ``"normal"``
    (resampled until positive) or ``"empirical"`` (uniform over ``samples``).
    """

    device_model: str
    mean: float
    std: float = 0.0
    dist: str = "lognormal"
    samples: np.ndarray | None = None
    max_cpu_pct: float = float("nan")

    def __post_init__(self):
        if self.dist not in ("lognormal", "normal", "empirical"):
            raise ValueError(f"unknown distribution {self.dist!r}")
        if self.dist == "empirical":
            if self.samples is None or len(self.samples) == 0:
                raise ValueError(f"{self.device_model}: empirical profile needs samples")
            self.samples = np.asarray(self.samples, dtype=np.float64)
            if np.any(self.samples <= 0):
                raise ValueError(f"{self.device_model}: samples must be > 0")
            self.mean = float(self.samples.mean())
        if not self.mean > 0:
            raise ValueError(f"{self.device_model}: mean must be > 0")
        if self.std < 0:
            raise ValueError(f"{self.device_model}: std must be >= 0")

    @classmethod
    def from_benchmark(cls, device_model: str, mean_s: float, std_s: float,
                       n_records: int = 5000, **kw) -> "DeviceProfile":
        """Profile from a benchmark reporting total time over ``n_records`` examples."""
        return cls(device_model, mean_s / n_records, std_s / n_records, **kw)

    @classmethod
    def lognormal(cls, device_model: str, median: float, sigma: float, **kw) -> "DeviceProfile":
        mean = median * math.exp(0.5 * sigma ** 2)
        std = mean * math.sqrt(math.expm1(sigma ** 2))
        return cls(device_model, mean, std, dist="lognormal", **kw)

    def sample(self, rng: np.random.Generator) -> float:
        if self.dist == "empirical":
            return float(self.samples[rng.integers(len(self.samples))])
        if self.std == 0:
            return self.mean
        if self.dist == "normal":
            return _positive_draw(lambda: rng.normal(self.mean, self.std), self.device_model)
        s2 = math.log1p((self.std / self.mean) ** 2)
        mu = math.log(self.mean) - 0.5 * s2
        return _positive_draw(lambda: rng.lognormal(mu, math.sqrt(s2)), self.device_model)


@dataclass
class BandwidthModel:
    """Network bandwidth in MB/s: empirical samples or lognormal(mu, sigma)."""

    mu: float = math.log(2.5)
    sigma: float = 0.8
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.samples is not None:
            self.samples = np.asarray(self.samples, dtype=np.float64)
            if self.samples.size == 0 or np.any(self.samples <= 0):
                raise ValueError("bandwidth samples must be non-empty and > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def sample(self, rng: np.random.Generator) -> float:
        if self.samples is not None:
            return float(self.samples[rng.integers(len(self.samples))])
        return _positive_draw(lambda: rng.lognormal(self.mu, self.sigma), "bandwidth")


@dataclass
class DevicePopulation:
    profiles: dict  # device_model -> DeviceProfile
    marginal: dict  # device_model -> population share
    assignment: dict = field(default_factory=dict)  # client_id -> device_model

    def __post_init__(self):
        total = sum(self.marginal.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"device shares sum to {total}, expected 1")
        missing = set(self.marginal) - set(self.profiles)
        if missing:
            raise ValueError(f"no profile for device models {sorted(missing)}")
        unknown = set(self.assignment.values()) - set(self.profiles)
        if unknown:
            raise ValueError(f"clients mapped to unprofiled device models {sorted(unknown)}")

    def assign(self, client_ids, seed: int) -> "DevicePopulation":
        """Draw a device model for every client from the marginal shares."""
        models = sorted(self.marginal)
        p = np.array([self.marginal[m] for m in models])
        rng = np.random.default_rng(seed)
        ids = sorted(client_ids)
        picks = rng.choice(len(models), size=len(ids), p=p / p.sum())
        return DevicePopulation(self.profiles, self.marginal,
                                {c: models[i] for c, i in zip(ids, picks)})

    def profile_of(self, client_id) -> DeviceProfile:
        return self.profiles[self.assignment[client_id]]


def default_population(base_mean: float = 61.81 / 5000, base_std: float = 44.17 / 5000,
                       sigma: float | None = None) -> DevicePopulation:
    """Three device tiers around one benchmarked per-example time.

    With ``sigma`` set, every tier is lognormal with that log-scale spread
    instead of moment-matched to ``base_std``.
    """
    tiers = {"low-end": (0.25, 1.8), "mid-range": (0.45, 1.0), "high-end": (0.30, 0.6)}
    profiles = {}
    for name, (_, speed) in tiers.items():
        if sigma is None:
            profiles[name] = DeviceProfile(name, base_mean * speed, base_std * speed)
        else:
            median = base_mean * speed * math.exp(-0.5 * sigma ** 2)
            profiles[name] = DeviceProfile.lognormal(name, median, sigma)
    return DevicePopulation(profiles, {n: s for n, (s, _) in tiers.items()})
