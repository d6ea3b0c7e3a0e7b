"""Proxy datasets: per-client partitions, executor shards, and client statistics."""

from __future__ import annotations

import csv
import hashlib
import heapq
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class ClientPartition:
    """All records of one client, stored column-wise."""

    client_id: int
    X: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) label or graded relevance
    groups: np.ndarray | None = None  # (n,) ranking query ids

    def __post_init__(self):
        if len(self.y) < 1:
            raise DataError(f"client {self.client_id} has no records")
        if self.X.shape[0] != len(self.y):
            raise DataError(f"client {self.client_id}: {self.X.shape[0]} feature rows, {len(self.y)} labels")

    def __len__(self):
        return len(self.y)


@dataclass
class ExecutorShard:
    executor_id: int
    partitions: list


@dataclass
class PartitionStats:
    client_pop: int
    max_records: int
    avg_records: float
    std_records: float
    label_ratio: float
    lookback_days: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ------------------------------------------------------------------ partitioning

def partition_natural(X, y, keys, groups=None) -> list[ClientPartition]:
    """Group records by client key; keys become integers 0..K-1 in sorted key order.

    Record order inside a client is preserved.
    """
    keys = np.asarray(keys, dtype=object)
    if len(keys) == 0:
        return []
    for i, k in enumerate(keys):
        if k is None or (isinstance(k, str) and not k) or (isinstance(k, float) and math.isnan(k)):
            raise DataError(f"record {i} has no client key")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if not (len(X) == len(y) == len(keys)):
        raise DataError("X, y and keys must have the same length")
    try:
        uniq, inv = np.unique(keys, return_inverse=True)
    except TypeError:
        raise DataError("client keys must all be of one comparable type") from None
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
    g = None if groups is None else np.asarray(groups)
    out = []
    for cid in range(len(uniq)):
        idx = order[bounds[cid]:bounds[cid + 1]]
        out.append(ClientPartition(cid, X[idx], y[idx], None if g is None else g[idx]))
    return out


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integers proportional to ``weights`` summing exactly to ``total``.

    Ties in the fractional part go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = w / w.sum() * total
    base = np.floor(exact).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        frac = exact - base
        base[np.argsort(-frac, kind="stable")[:short]] += 1
    return base


def partition_dirichlet(X, y, n_clients: int, alpha_label: float, alpha_quantity: float,
                        seed: int, groups=None) -> list[ClientPartition]:
    """Synthetic non-IID split with Dirichlet quantity and label skew.

    Client sizes follow Dirichlet(alpha_quantity) (every client keeps at least
    one record) and each client's label mix follows a Dirichlet centred on the
    global label distribution with total concentration alpha_label times the
    number of classes (so balanced labels get Dirichlet(alpha_label) per
    class), drawn independently. Targets are rounded by largest remainder; where a
    label is over-demanded, clients are served in a random order until its
    supply runs out, and the records left over go one by one to the client
    with the largest remaining deficit.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = len(y)
    if n_clients < 1:
        raise DataError("n_clients must be >= 1")
    if n_clients > n:
        raise DataError(f"{n_clients} clients but only {n} records")
    if alpha_label <= 0 or alpha_quantity <= 0:
        raise DataError("Dirichlet concentrations must be > 0")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    n_cls = len(classes)

    q = rng.dirichlet(np.full(n_clients, float(alpha_quantity)))
    sizes = 1 + largest_remainder(q, n - n_clients)
    mix = rng.dirichlet(alpha_label * n_cls * counts / n, size=n_clients)
    targets = np.stack([largest_remainder(mix[k], sizes[k]) for k in range(n_clients)])

    by_label = [rng.permutation(np.flatnonzero(y == c)) for c in classes]
    # an over-demanded label is handed out in a random client order, so the
    # shortfall lands on a few clients instead of flattening every mixture
    order = rng.permutation(n_clients)
    alloc = np.zeros_like(targets)
    for j in range(n_cls):
        want = targets[order, j]
        before = np.cumsum(want) - want
        alloc[order, j] = np.clip(len(by_label[j]) - before, 0, want)

    assigned = [[] for _ in range(n_clients)]
    pool = []
    for j in range(n_cls):
        idx = by_label[j]
        cuts = np.r_[0, np.cumsum(alloc[:, j])]
        for k in range(n_clients):
            assigned[k].extend(idx[cuts[k]:cuts[k + 1]].tolist())
        pool.extend(idx[cuts[-1]:].tolist())
    pool = [pool[i] for i in rng.permutation(len(pool))]

    deficit = sizes - alloc.sum(axis=1)
    heap = [(-int(d), k) for k, d in enumerate(deficit) if d > 0]
    heapq.heapify(heap)
    for rec in pool:
        d, k = heapq.heappop(heap)
        assigned[k].append(rec)
        if d + 1 < 0:
            heapq.heappush(heap, (d + 1, k))

    g = None if groups is None else np.asarray(groups)
    out = []
    for k in range(n_clients):
        idx = np.sort(np.asarray(assigned[k], dtype=np.int64))
        out.append(ClientPartition(k, X[idx], y[idx], None if g is None else g[idx]))
    return out


def round_robin_shard(partitions, n_executors: int) -> list[ExecutorShard]:
    """Partition i in client-id order goes to executor i mod n_executors."""
    if n_executors < 1:
        raise DataError("n_executors must be >= 1")
    shards = [ExecutorShard(e, []) for e in range(n_executors)]
    for i, p in enumerate(sorted(partitions, key=lambda p: p.client_id)):
        shards[i % n_executors].partitions.append(p)
    return shards


def compute_stats(partitions, lookback_days: float | None = None) -> PartitionStats:
    """Client population, per-client record count max/mean/population-std, positive ratio."""
    partitions = list(partitions)
    if not partitions:
        raise DataError("no partitions")
    sizes = np.array([len(p) for p in partitions], dtype=np.float64)
    pos = sum(int(np.count_nonzero(np.asarray(p.y) > 0)) for p in partitions)
    return PartitionStats(
        client_pop=len(partitions),
        max_records=int(sizes.max()),
        avg_records=float(sizes.mean()),
        std_records=float(sizes.std()),
        label_ratio=pos / float(sizes.sum()),
        lookback_days=lookback_days,
    )


# ------------------------------------------------------------------ synthetic data

@dataclass
class SyntheticTabularConfig:
    """Linearly separable core with label noise and Zipf-tailed client sizes."""

    n_clients: int = 1000
    n_features: int = 16
    avg_records: float = 99.0
    zipf_a: float = 2.0
    max_records: int = 5000
    positive_ratio: float = 0.28
    label_noise: float = 0.02
    client_shift: float = 0.3  # std of per-client feature mean shift
    relevance_levels: int = 0  # >1: graded relevance 0..levels-1 instead of binary labels
    group_size: int = 0  # >0: consecutive records of a client form ranking groups


def synthetic_tabular(cfg: SyntheticTabularConfig, seed: int):
    """Returns ``(X, y, client_keys, groups)``; groups is None unless requested."""
    rng = np.random.default_rng(seed)
    z = np.minimum(rng.zipf(cfg.zipf_a, cfg.n_clients), cfg.max_records).astype(np.float64)

    def sized(scale):
        return np.clip(np.round(z * scale), 1, cfg.max_records)

    # clipping shifts the mean, so search for the scale that restores it
    lo, hi = 0.0, cfg.avg_records / z.min()
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if sized(mid).mean() < cfg.avg_records else (lo, mid)
    sizes = sized(hi).astype(np.int64)
    keys = np.repeat(np.arange(cfg.n_clients), sizes)
    shift = rng.normal(0.0, cfg.client_shift, (cfg.n_clients, cfg.n_features))
    X = rng.normal(size=(keys.size, cfg.n_features)) + shift[keys]
    w_true = rng.normal(size=cfg.n_features)
    w_true /= np.linalg.norm(w_true)
    score = X @ w_true
    thr = np.quantile(score, 1 - cfg.positive_ratio)
    y = (score > thr).astype(np.float64)
    flip = rng.random(y.size) < cfg.label_noise
    y[flip] = 1 - y[flip]
    if cfg.relevance_levels > 1:
        # positives graded 1..levels-1 by score rank among positives
        pos = np.flatnonzero(y > 0)
        rank = np.argsort(np.argsort(score[pos])) / max(len(pos), 1)
        y[pos] = 1 + np.floor(rank * (cfg.relevance_levels - 1))
    groups = None
    if cfg.group_size > 0:
        within = np.arange(keys.size) - np.repeat(np.cumsum(sizes) - sizes, sizes)
        groups = keys * (cfg.max_records // cfg.group_size + 1) + within // cfg.group_size
    return X, y, keys, groups


def holdout_mask(n: int, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask selecting roughly ``fraction`` of records for a test set."""
    return np.random.default_rng(seed).random(n) < fraction


# ------------------------------------------------------------------ text input

def read_records_csv(path, n_features: int, label: str = "label", client: str = "client",
                     group: str | None = None):
    """Delimited records with a header: client key, label, optional group, features f0..f{d-1}."""
    keys, ys, gs, rows = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        feats = [f"f{i}" for i in range(n_features)]
        missing = [c for c in [client, label, *feats] + ([group] if group else []) if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            keys.append(row[client])
            ys.append(float(row[label]))
            rows.append([float(row[f]) for f in feats])
            if group:
                gs.append(int(row[group]))
    X = np.array(rows, dtype=np.float64).reshape(len(rows), n_features)
    return X, np.array(ys), keys, (np.array(gs) if group else None)


# ------------------------------------------------------------------ shard files
#
# header : b"FSHD" u16 version u16 flags u32 n_features u32 executor_id u32 n_clients
# block  : u64 block_len | i64 client_id u32 n | f8[n*d] X | f8[n] y | [i8[n] groups]
# block_len counts the bytes after the length field.

SHARD_MAGIC = b"FSHD"
SHARD_VERSION = 1
_HDR = struct.Struct("<4sHHIII")
_BLK = struct.Struct("<Q")
_CLI = struct.Struct("<qI")


def write_shard(path, shard: ExecutorShard) -> None:
    parts = shard.partitions
    d = parts[0].X.shape[1] if parts else 0
    has_groups = bool(parts) and parts[0].groups is not None
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(SHARD_MAGIC, SHARD_VERSION, int(has_groups), d, shard.executor_id, len(parts)))
        for p in parts:
            if p.X.shape[1] != d:
                raise DataError(f"client {p.client_id}: feature dimension {p.X.shape[1]} != {d}")
            if (p.groups is not None) != has_groups:
                raise DataError(f"client {p.client_id}: group ids present in some clients only")
            body = [_CLI.pack(int(p.client_id), len(p)),
                    np.ascontiguousarray(p.X, dtype="<f8").tobytes(),
                    np.ascontiguousarray(p.y, dtype="<f8").tobytes()]
            if has_groups:
                body.append(np.ascontiguousarray(p.groups, dtype="<i8").tobytes())
            blob = b"".join(body)
            fh.write(_BLK.pack(len(blob)))
            fh.write(blob)


class ShardReader:
    """Random access to the client blocks of one shard file."""

    def __init__(self, path):
        self.path = Path(path)
        self.offsets: dict = {}
        self.sizes: dict = {}
        with open(self.path, "rb") as fh:
            raw = fh.read(_HDR.size)
            if len(raw) < _HDR.size:
                raise DataError(f"{path}: truncated shard header")
            magic, version, flags, d, ex, n_clients = _HDR.unpack(raw)
            if magic != SHARD_MAGIC or version != SHARD_VERSION:
                raise DataError(f"{path}: not a version-{SHARD_VERSION} shard file")
            self.n_features, self.executor_id, self.has_groups = d, ex, bool(flags & 1)
            pos = _HDR.size
            for _ in range(n_clients):
                fh.seek(pos)
                (blen,) = _BLK.unpack(fh.read(_BLK.size))
                cid, n = _CLI.unpack(fh.read(_CLI.size))
                self.offsets[cid] = pos + _BLK.size
                self.sizes[cid] = n
                pos += _BLK.size + blen

    def client_ids(self) -> list:
        return list(self.offsets)

    def load(self, client_id) -> ClientPartition:
        d = self.n_features
        with open(self.path, "rb") as fh:
            fh.seek(self.offsets[client_id])
            cid, n = _CLI.unpack(fh.read(_CLI.size))
            X = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).astype(np.float64)
            y = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            g = np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64) if self.has_groups else None
        return ClientPartition(cid, X, y, g)

    def load_all(self) -> ExecutorShard:
        return ExecutorShard(self.executor_id, [self.load(c) for c in self.offsets])


def read_shard(path) -> ExecutorShard:
    return ShardReader(path).load_all()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def shards_digest(paths) -> str:
    """Digest over a set of shard files, independent of listing order."""
    h = hashlib.sha256()
    for d in sorted(file_digest(p) for p in paths):
        h.update(d.encode())
    return h.hexdigest()


def write_shards(out_dir, shards) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in shards:
        p = out_dir / f"shard-{s.executor_id:05d}.bin"
        write_shard(p, s)
        paths.append(p)
    return paths


def shards_fingerprint(shards) -> str:
    """Digest of shard files or in-memory shards, independent of order."""
    digests = []
    for s in shards:
        if not isinstance(s, ExecutorShard):
            digests.append(file_digest(s))
            continue
        h = hashlib.sha256()
        for p in sorted(s.partitions, key=lambda p: p.client_id):
            h.update(repr(p.client_id).encode())
            h.update(np.ascontiguousarray(p.X, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(p.y, dtype="<f8").tobytes())
            if p.groups is not None:
                h.update(np.ascontiguousarray(p.groups, dtype="<i8").tobytes())
        digests.append(h.hexdigest())
    h = hashlib.sha256()
    for d in sorted(digests):
        h.update(d.encode())
    return h.hexdigest()
