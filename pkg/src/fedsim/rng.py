"""Seed derivation.

Every random stream in a run is derived from one master seed plus a tuple of
tags, so a stream never depends on how many draws some other component made.
Python's built-in ``hash`` is salted per process and is never used here.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *tags: object) -> int:
    """Stable 64-bit seed for ``(master, *tags)``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for tag in tags:
        if isinstance(tag, np.generic):
            tag = tag.item()  # numpy scalars repr differently from Python ones
        h.update(b"\x1f")
        h.update(repr(tag).encode())
    return int.from_bytes(h.digest(), "little")


def stream(master: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


def task_seed(master: int, client_id: object, task_index: int) -> int:
    return derive_seed(master, "task", client_id, task_index)


def trial_seed(master: int, trial_index: int) -> int:
    return derive_seed(master, "trial", trial_index)
