"""Device availability traces.

Session logs are split into availability windows, thinned by participation
criteria, and indexed so the scheduler can ask for the next free client at a
virtual time.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

HOUR = 3600
WEEK_HOURS = 168


class TraceError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class RawSession:
    client_id: object
    segments: tuple  # ((start, end, foreground), ...)


@dataclass(frozen=True, order=True, slots=True)
class AvailabilitySession:
    start: float
    client_id: object
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise TraceError(f"session for client {self.client_id!r} has start >= end "
                             f"({self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start


def canonical(sessions: Iterable[AvailabilitySession]) -> list[AvailabilitySession]:
    return sorted(sessions, key=lambda s: (s.start, s.client_id, s.end))


def split_sessions(raw: RawSession, short_gap_max: float,
                   long_gap_min: float) -> list[AvailabilitySession]:
    """Turn one client's foreground/background log into availability sessions.

    Only foreground time is usable. A gap between two foreground segments
    (background segments or unlogged time) of at most ``short_gap_max`` keeps
    the session going but its length is subtracted from the session end; any
    longer gap closes the session.
    """
    if short_gap_max > long_gap_min:
        raise TraceError("short_gap_max must be <= long_gap_min")
    prev_end = -math.inf
    for seg in raw.segments:
        start, end = seg[0], seg[1]
        if not start < end:
            raise TraceError(f"client {raw.client_id!r}: segment {seg} has start >= end")
        if start < prev_end:
            raise TraceError(f"client {raw.client_id!r}: segments overlap or are unordered at {seg}")
        prev_end = end

    out = []
    cur_start = cur_end = None
    removed = 0.0
    for start, end, fg in raw.segments:
        if not fg:
            continue
        if cur_start is None:
            cur_start, cur_end, removed = start, end, 0.0
            continue
        gap = start - cur_end
        if gap <= short_gap_max:
            removed += gap
            cur_end = end
        else:
            out.append(AvailabilitySession(cur_start, raw.client_id, cur_end - removed))
            cur_start, cur_end, removed = start, end, 0.0
    if cur_start is not None:
        out.append(AvailabilitySession(cur_start, raw.client_id, cur_end - removed))
    return out


# ------------------------------------------------------------------ criteria

def _as_curve(value, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.ndim != 1 or arr.size == 0:
        raise TraceError(f"{name}: expected a scalar or a 1-d array")
    if np.any((arr < 0) | (arr > 1)) or not np.all(np.isfinite(arr)):
        raise TraceError(f"{name}: probabilities must lie in [0, 1]")
    return arr


@dataclass
class CriteriaModel:
    """Participation criteria applied as independent weighted coin flips.

    ``p_wifi`` and ``p_battery`` are piecewise-constant curves over time of
    week (``bin_s`` wide bins, typically 168 hourly values) or scalars.
    """

    p_wifi: np.ndarray = 1.0
    p_battery: np.ndarray = 1.0
    os_pass_rate: float = 1.0
    bin_s: float = HOUR

    def __post_init__(self):
        self.p_wifi = _as_curve(self.p_wifi, "p_wifi")
        self.p_battery = _as_curve(self.p_battery, "p_battery")
        self.os_pass_rate = float(_as_curve(self.os_pass_rate, "os_pass_rate")[0])
        if self.bin_s <= 0:
            raise TraceError("bin_s must be > 0")

    @classmethod
    def from_config(cls, section: dict) -> "CriteriaModel":
        return cls(p_wifi=section.get("p_wifi", 1.0), p_battery=section.get("p_battery", 1.0),
                   os_pass_rate=section.get("os_pass_rate", 1.0),
                   bin_s=section.get("bin_s", HOUR))

    @staticmethod
    def _at(curve: np.ndarray, t: np.ndarray, bin_s: float) -> np.ndarray:
        if curve.size == 1:
            return np.full(t.shape, curve[0])
        return curve[(np.floor_divide(t, bin_s).astype(np.int64)) % curve.size]

    def probabilities(self, starts) -> np.ndarray:
        """Per-criterion pass probability, shape (n, 3): wifi, battery, os."""
        t = np.asarray(starts, dtype=np.float64)
        return np.column_stack([self._at(self.p_wifi, t, self.bin_s),
                                self._at(self.p_battery, t, self.bin_s),
                                np.full(t.shape, self.os_pass_rate)])

    def keep_probability(self, starts) -> np.ndarray:
        return self.probabilities(starts).prod(axis=1)


@dataclass
class Funnel:
    n_sessions: int
    passed: dict  # criterion -> count passing it alone
    kept: list

    def rows(self) -> list[tuple[str, float]]:
        n = max(self.n_sessions, 1)
        rows = [(name, cnt / n) for name, cnt in self.passed.items()]
        rows.append(("all criteria", len(self.kept) / n))
        return rows

    def table(self) -> str:
        lines = [f"{'criterion':<20}{'sessions available':>20}"]
        lines += [f"{name:<20}{frac:>19.1%}" for name, frac in self.rows()]
        return "\n".join(lines)


def criteria_funnel(sessions: Iterable[AvailabilitySession], criteria: CriteriaModel,
                    seed: int) -> Funnel:
    """One uniform draw per session and criterion; a session survives if all pass.

    Draws are taken in canonical session order from ``default_rng(seed)`` as
    an (n, 3) block, so the outcome does not depend on input order.
    """
    ss = canonical(sessions)
    rng = np.random.default_rng(seed)
    p = criteria.probabilities([s.start for s in ss]).reshape(len(ss), 3)
    u = rng.random((len(ss), 3))
    ok = u < p
    keep = ok.all(axis=1)
    passed = {"wifi": int(ok[:, 0].sum()), "battery": int(ok[:, 1].sum()),
              "os release": int(ok[:, 2].sum())}
    return Funnel(len(ss), passed, [s for s, k in zip(ss, keep) if k])


def filter_by_criteria(sessions, criteria: CriteriaModel, seed: int) -> list[AvailabilitySession]:
    return criteria_funnel(sessions, criteria, seed).kept


# ------------------------------------------------------------------ index

class AvailabilityIndex:
    """Answers "which free client can start next" over a fixed session set.

    Queries with non-decreasing ``now`` are served incrementally from a heap
    of sessions spanning ``now``; a query going back in time rebuilds it.
    With ``cooldown_s > 0`` a client cannot start a task until that long
    after its previous task ended (see :meth:`mark_done`).
    """

    def __init__(self, sessions: Iterable[AvailabilitySession], horizon: float = math.inf,
                 cooldown_s: float = 0.0):
        self.sessions = canonical(sessions)
        self.starts = [s.start for s in self.sessions]
        self.horizon = horizon
        self.cooldown_s = cooldown_s
        self.ready_at: dict = {}
        self._reset()

    def __len__(self):
        return len(self.sessions)

    def _reset(self):
        self._ptr = 0
        self._active: list = []
        self._now = -math.inf

    def mark_done(self, client_id, end_time: float) -> None:
        if self.cooldown_s > 0:
            self.ready_at[client_id] = end_time + self.cooldown_s

    def next_available(self, now: float, busy=frozenset()):
        if now < 0:
            raise TraceError("now must be >= 0")
        if self.cooldown_s > 0:
            return self._scan(now, busy)
        if now < self._now:
            self._reset()
        self._now = now
        sessions = self.sessions
        while self._ptr < len(sessions) and sessions[self._ptr].start <= now:
            s = sessions[self._ptr]
            heapq.heappush(self._active, (s.client_id, s.end, self._ptr))
            self._ptr += 1
        held = []
        found = None
        while self._active:
            cid, end, i = self._active[0]
            if end <= now:
                heapq.heappop(self._active)
                continue
            if cid in busy:
                held.append(heapq.heappop(self._active))
                continue
            found = AvailabilitySession(now, cid, end)
            break
        for item in held:
            heapq.heappush(self._active, item)
        i = self._ptr
        while found is None and i < len(sessions):
            if sessions[i].client_id not in busy:
                found = sessions[i]
            i += 1
        if found is None or found.start > self.horizon:
            return None
        return found.client_id, found

    def _scan(self, now, busy):
        best = None
        for s in self.sessions:
            if s.client_id in busy or s.end <= now:
                continue
            eff = max(s.start, now, self.ready_at.get(s.client_id, -math.inf))
            if eff >= s.end:
                continue
            key = (eff, s.client_id)
            if best is None or key < best[0]:
                best = (key, s)
        if best is None or best[0][0] > self.horizon:
            return None
        eff, cid = best[0]
        return cid, AvailabilitySession(eff, cid, best[1].end)


def next_available_client(index: AvailabilityIndex, now: float, busy=frozenset()):
    """Earliest-starting session of a client not in ``busy``.

    A session already running at ``now`` starts effectively at ``now``;
    equal effective starts go to the smaller client id. Returns
    ``(client_id, session)`` or None.
    """
    return index.next_available(now, busy)


# ------------------------------------------------------------------ curves

def availability_curve(sessions: Iterable[AvailabilitySession], bin_s: float,
                       horizon: float | None = None) -> np.ndarray:
    """Number of sessions overlapping each ``[k*bin_s, (k+1)*bin_s)`` bin."""
    if bin_s <= 0:
        raise TraceError("bin_s must be > 0")
    ss = list(sessions)
    if not ss:
        return np.zeros(0 if horizon is None else int(math.ceil(horizon / bin_s)), dtype=np.int64)
    st = np.array([s.start for s in ss], dtype=np.float64)
    en = np.array([s.end for s in ss], dtype=np.float64)
    if horizon is None:
        horizon = float(en.max())
    n_bins = int(math.ceil(horizon / bin_s))
    first = np.floor(st / bin_s).astype(np.int64)
    last = np.ceil(en / bin_s).astype(np.int64) - 1
    first = np.clip(first, 0, n_bins)
    last = np.clip(last, -1, n_bins - 1)
    ok = last >= first
    diff = np.zeros(n_bins + 1, dtype=np.int64)
    np.add.at(diff, first[ok], 1)
    np.add.at(diff, last[ok] + 1, -1)
    return np.cumsum(diff)[:n_bins]


def trough_peak_ratio(curve: np.ndarray, bins_per_day: int = 24) -> float:
    """Mean of the daily minima over the overall maximum (whole days only)."""
    days = len(curve) // bins_per_day
    if days == 0:
        raise TraceError("curve shorter than one day")
    daily = np.asarray(curve[: days * bins_per_day], dtype=np.float64).reshape(days, bins_per_day)
    return float(daily.min(axis=1).mean() / daily.max())


# ------------------------------------------------------------------ synthetic

@dataclass
class DiurnalTraceConfig:
    """Parameters of the synthetic availability generator.

    Session arrivals per client follow an inhomogeneous Poisson process whose
    hourly rate is ``trough + (1 - trough) * weekday_level * daily_shape``;
    ``daily_shape`` is 0 at ``trough_hour`` and 1 twelve hours later, so
    every daily minimum sits at ``trough`` of the weekly peak.
    """

    n_clients: int = 1000
    days: int = 7
    sessions_per_day: float = 4.0  # average per client
    mean_duration_s: float = 900.0
    duration_sigma: float = 1.0
    activity_sigma: float = 0.5  # per-client rate heterogeneity (lognormal)
    trough: float = 0.15
    trough_hour: float = 4.0
    weekday_levels: Sequence[float] = (1.0, 0.95, 0.9, 0.95, 0.85, 0.6, 0.55)
    noise: float = 0.03

    def hourly_rate_shape(self, rng: np.random.Generator) -> np.ndarray:
        hours = np.arange(self.days * 24)
        hod = hours % 24
        day = (hours // 24) % len(self.weekday_levels)
        daily = (0.5 * (1 - np.cos(2 * np.pi * (hod - self.trough_hour) / 24))) ** 1.5
        levels = np.asarray(self.weekday_levels, dtype=np.float64)[day]
        shape = self.trough + (1 - self.trough) * levels * daily
        if self.noise > 0:
            shape = shape * np.exp(rng.normal(0.0, self.noise, shape.size))
        return shape


def synthetic_sessions(cfg: DiurnalTraceConfig, seed: int) -> list[AvailabilitySession]:
    """Generate integer-second availability sessions for clients ``0..n_clients-1``.

    Overlapping sessions of one client are merged.
    """
    rng = np.random.default_rng(seed)
    shape = cfg.hourly_rate_shape(rng)
    fmax = shape.max()
    horizon = cfg.days * 86400
    activity = rng.lognormal(-0.5 * cfg.activity_sigma ** 2, cfg.activity_sigma, cfg.n_clients)
    # thinning against the shape maximum; mean shape normalised to sessions_per_day
    base_rate = cfg.sessions_per_day / 86400 / shape.mean()
    counts = rng.poisson(activity * base_rate * fmax * horizon)
    cid = np.repeat(np.arange(cfg.n_clients), counts)
    t = rng.random(cid.size) * horizon
    keep = rng.random(cid.size) < shape[(t // HOUR).astype(np.int64)] / fmax
    cid, t = cid[keep], t[keep]
    mu = math.log(cfg.mean_duration_s) - 0.5 * cfg.duration_sigma ** 2
    dur = rng.lognormal(mu, cfg.duration_sigma, cid.size)
    start = np.floor(t)
    end = np.minimum(np.maximum(start + 1, np.ceil(t + dur)), horizon)
    ok = end > start
    cid, start, end = cid[ok], start[ok], end[ok]

    # union of overlapping intervals per client: offset clients apart in time
    offset = cid.astype(np.float64) * (2.0 * horizon + 1)
    order = np.lexsort((start, cid))
    cid, s, e = cid[order], start[order] + offset[order], end[order] + offset[order]
    run_end = np.maximum.accumulate(e)
    new = np.r_[True, s[1:] > run_end[:-1]]
    grp = np.cumsum(new) - 1
    g_start = s[new]
    g_end = np.zeros(new.sum())
    np.maximum.at(g_end, grp, e)
    g_cid = cid[new]
    g_off = g_cid.astype(np.float64) * (2.0 * horizon + 1)
    return canonical(AvailabilitySession(int(a), int(c), int(b))
                     for a, b, c in zip(g_start - g_off, g_end - g_off, g_cid))


# ------------------------------------------------------------------ file format

TRACE_HEADER = "client,start,end"


def _parse_id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def write_trace(path, sessions: Iterable[AvailabilitySession]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for s in canonical(sessions):
            fh.write(f"{s.client_id},{int(s.start)},{int(s.end)}\n")


def read_trace(path) -> list[AvailabilitySession]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != TRACE_HEADER:
            raise TraceError(f"{path}: expected header {TRACE_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise TraceError(f"{path}:{lineno}: expected 3 fields")
            try:
                start, end = int(parts[1]), int(parts[2])
            except ValueError:
                raise TraceError(f"{path}:{lineno}: times must be integers") from None
            if start < 0:
                raise TraceError(f"{path}:{lineno}: negative start")
            out.append(AvailabilitySession(start, _parse_id(parts[0]), end))
    return canonical(out)


def read_raw_log(path) -> list[RawSession]:
    """Raw session log: ``client,start,end,foreground`` rows, any client order."""
    rows: dict = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "client,start,end,foreground":
            raise TraceError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            c, a, b, fg = line.split(",")
            rows.setdefault(_parse_id(c), []).append((float(a), float(b), fg.strip() in ("1", "true", "True")))
    return [RawSession(c, tuple(sorted(segs))) for c, segs in sorted(rows.items(), key=lambda kv: str(kv[0]))]


def sessions_by_client(sessions: Iterable[AvailabilitySession]) -> dict:
    out: dict = {}
    for s in canonical(sessions):
        out.setdefault(s.client_id, []).append(s)
    return out


def check_disjoint(sessions: Iterable[AvailabilitySession]) -> None:
    for cid, ss in sessions_by_client(sessions).items():
        ss.sort(key=lambda s: s.start)
        for a, b in zip(ss, ss[1:]):
            if b.start < a.end:
                raise TraceError(f"client {cid!r}: sessions overlap at {b.start}")


def clients_in(sessions: Iterable[AvailabilitySession]) -> list:
    return sorted({s.client_id for s in sessions})
