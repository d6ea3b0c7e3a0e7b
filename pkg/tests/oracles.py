"""Reference implementations used only by the tests.

Each one is written from the definition with plain loops and shares no code
with the package beyond its data classes.
"""

from __future__ import annotations

import math
from collections import defaultdict


# ---------------------------------------------------------------- traces

def split_linear_scan(segments, short_gap_max, long_gap_min):
    """Rasterise integer segments to one flag per second and scan the timeline.

    Foreground seconds are collected into maximal runs; runs separated by at
    most ``short_gap_max`` idle seconds are one session whose end is pulled
    in by the idle time.
    """
    fg = set()
    for start, end, is_fg in segments:
        if is_fg:
            fg.update(range(int(start), int(end)))
    if not fg:
        return []
    runs = []
    t = min(fg)
    last = max(fg)
    while t <= last:
        if t in fg:
            a = t
            while t in fg:
                t += 1
            runs.append((a, t))
        else:
            t += 1
    out = []
    s0, e0 = runs[0]
    idle = 0
    for a, b in runs[1:]:
        if a - e0 <= short_gap_max:
            idle += a - e0
            e0 = b
        else:
            out.append((s0, e0 - idle))
            s0, e0, idle = a, b, 0
    out.append((s0, e0 - idle))
    return out


def brute_next_available(sessions, now, busy, horizon=math.inf):
    best = None
    for s in sessions:
        if s.client_id in busy or s.end <= now:
            continue
        eff = max(s.start, now)
        key = (eff, s.client_id)
        if best is None or key < best[0]:
            best = (key, s)
    if best is None or best[0][0] > horizon:
        return None
    return best[0][1], best[0][0], best[1].end


# ---------------------------------------------------------------- scheduler

def agenda_schedule(sessions, duration_fn, C, horizon=math.inf):
    """Async dispatch order from an explicit agenda, scanned linearly.

    Returns a list of (client_id, start, end) in dispatch order plus the
    maximum concurrency seen.
    """
    agenda = []  # [time, flag, client, task_no, (cid, start, end)]
    busy = set()
    counts = defaultdict(int)
    state = {"now": 0.0, "c": 0, "next": 0, "max_c": 0}

    def create():
        got = brute_next_available(sessions, state["now"], busy, horizon)
        if got is None:
            return
        cid, start, _ = got
        k = counts[cid]
        counts[cid] += 1
        d = duration_fn(cid, k)
        task = (cid, start, start + d)
        busy.add(cid)
        agenda.append([start, 1, cid, state["next"], task])
        agenda.append([start + d, 0, cid, state["next"], task])
        state["next"] += 1

    out = []
    create()
    while agenda:
        i_min = 0
        for i in range(1, len(agenda)):
            if agenda[i][:4] < agenda[i_min][:4]:
                i_min = i
        time, flag, cid, _, task = agenda[i_min]
        if time > horizon:
            break
        agenda.pop(i_min)
        if flag == 1:
            state["c"] += 1
            state["max_c"] = max(state["max_c"], state["c"])
            if state["c"] < C:
                create()
        else:
            state["c"] -= 1
            busy.discard(cid)
            state["now"] = task[2]
            if state["c"] == C - 1:
                create()
            out.append(task)
    return out, state["max_c"]


def completion_sort_round(sessions, t0, S, overcommit, deadline, duration_fn, counts):
    """Synchronous round settled by sorting all simulated completions."""
    want = math.ceil(S * overcommit - 1e-9)
    busy = set()
    chosen = []
    for _ in range(want):
        got = brute_next_available(sessions, t0, busy)
        if got is None:
            break
        cid, start, send = got
        busy.add(cid)
        k = counts.get(cid, 0)
        counts[cid] = k + 1
        chosen.append((cid, start, start + duration_fn(cid, k), send))
    if not chosen:
        return None
    if deadline is None:
        offs = sorted(e - t0 for _, _, e, _ in chosen)
        # linear-interpolated 95th percentile
        pos = 0.95 * (len(offs) - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, len(offs) - 1)
        deadline = offs[lo] + (offs[hi] - offs[lo]) * (pos - lo)
    limit = t0 + deadline
    finished = sorted((e, cid) for cid, s, e, send in chosen if e <= send and e <= limit)
    if len(finished) >= S:
        agg = [cid for _, cid in finished[:S]]
        close = finished[S - 1][0]
    else:
        agg = []
        close = limit
    started = [c for c in chosen if c[1] < close]
    interrupted = sorted(cid for cid, s, e, send in started if e > send)
    stragglers = sorted(cid for cid, s, e, send in started if cid not in agg and e <= send)
    return {"aggregated": agg, "close": close, "interrupted": interrupted,
            "stragglers": stragglers, "failed": not agg,
            "not_started": sorted(c[0] for c in chosen if c[1] >= close)}


# ---------------------------------------------------------------- metrics

def aupr_by_thresholds(scores, labels):
    """Sum of recall increments times precision over every distinct threshold."""
    pos = sum(1 for v in labels if v > 0)
    prev_recall = 0.0
    area = 0.0
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for s, v in zip(scores, labels) if s >= thr and v > 0)
        fp = sum(1 for s, v in zip(scores, labels) if s >= thr and v <= 0)
        recall = tp / pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def ndcg_by_hand(scores, rel, groups, k):
    by_group = defaultdict(list)
    for s, r, g in zip(scores, rel, groups):
        by_group[g].append((s, r))
    vals = []
    for items in by_group.values():
        ranked = [r for _, r in sorted(items, key=lambda t: -t[0])]
        ideal = sorted((r for _, r in items), reverse=True)
        dcg = sum((2 ** r - 1) / math.log2(i + 2) for i, r in enumerate(ranked[:k]))
        idcg = sum((2 ** r - 1) / math.log2(i + 2) for i, r in enumerate(ideal[:k]))
        if idcg > 0:
            vals.append(dcg / idcg)
    return sum(vals) / len(vals)


# ---------------------------------------------------------------- aggregation

def fedavg_loop(weights, deltas, counts, server_lr):
    out = list(weights)
    total = sum(counts)
    for j in range(len(out)):
        acc = 0.0
        for d, n in zip(deltas, counts):
            acc += n * d[j]
        out[j] += server_lr * acc / total
    return out


def group_by(keys):
    sizes = {}
    for k in keys:
        sizes[k] = sizes.get(k, 0) + 1
    return sizes


def sorted_bounds(values):
    v = sorted(values)
    n = len(v)
    med = v[n // 2] if n % 2 else 0.5 * (v[n // 2 - 1] + v[n // 2])
    return med, v[0], v[-1]
