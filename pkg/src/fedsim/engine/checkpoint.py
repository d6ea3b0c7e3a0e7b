"""Binary checkpoint file.

Layout: magic ``FSCK``, u16 format version, u32 header length, a UTF-8 JSON
header, then the raw little-endian float64 arrays listed in the header.
Files are written to a temporary name and renamed, so a crash mid-write
leaves the previous checkpoint intact.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(RuntimeError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


def save_checkpoint(path, header: dict, arrays: dict) -> None:
    """Write ``header`` plus named float64 ``arrays`` atomically."""
    path = Path(path)
    names = sorted(arrays)
    header = dict(header, arrays=[[n, int(np.asarray(arrays[n]).size)] for n in names])
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {version}")
    off = _PREFIX.size
    header = json.loads(raw[off:off + hlen])
    off += hlen
    arrays = {}
    for name, n in header.pop("arrays"):
        end = off + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64)
        off = end
    return header, arrays


def check_fingerprint(saved: dict, current: dict) -> None:
    """Refuse to resume when any identifying field differs."""
    for key in sorted(set(saved) | set(current)):
        if saved.get(key) != current.get(key):
            raise CheckpointMismatch(f"checkpoint {key} mismatch: saved {saved.get(key)!r}, "
                                     f"current {current.get(key)!r}")
