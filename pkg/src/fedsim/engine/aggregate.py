"""Server-side aggregation rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import ClientUpdate, ModelParams


class AggregationError(RuntimeError):
    pass


def staleness_weight(staleness: int, exponent: float = 0.5) -> float:
    """Polynomial staleness discount ``(1 + s) ** -exponent``."""
    return (1.0 + staleness) ** -exponent


def fedavg_aggregate(updates: list[ClientUpdate], params: ModelParams,
                     server_lr: float = 1.0) -> ModelParams:
    """Example-weighted mean of the deltas, all trained on the current version."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    bad = {u.base_version for u in updates} - {params.version}
    if bad:
        raise AggregationError(f"updates trained on versions {sorted(bad)}, "
                               f"server is at {params.version}")
    acc = np.zeros_like(params.weights)
    total = 0
    for u in updates:
        acc += u.n_examples * u.delta
        total += u.n_examples
    return ModelParams(params.weights + server_lr * (acc / total), params.version + 1)


@dataclass
class BufferAggState:
    buffer_size: int
    max_staleness: float
    server_version: int = 0
    staleness_exponent: float = 0.5
    buffer: list = field(default_factory=list)

    def add(self, update: ClientUpdate) -> bool:
        """Append an update; True when the buffer is full."""
        s = self.server_version - update.base_version
        if s > self.max_staleness:
            raise AggregationError(f"update from client {update.client_id} has staleness {s} "
                                   f"> {self.max_staleness}")
        update.staleness = s
        self.buffer.append(update)
        return len(self.buffer) >= self.buffer_size

    @property
    def full(self) -> bool:
        return len(self.buffer) >= self.buffer_size


def fedbuff_aggregate(state: BufferAggState, params: ModelParams, server_lr: float = 1.0,
                      *, partial: bool = False) -> ModelParams | None:
    """Staleness-weighted mean of the buffered deltas; clears the buffer.

    Returns None (no-op) while the buffer is not full, unless ``partial``
    is set for the end-of-run flush.
    """
    if not state.buffer or (not state.full and not partial):
        return None
    if params.version != state.server_version:
        raise AggregationError(f"buffer tracks version {state.server_version}, "
                               f"params are at {params.version}")
    acc = np.zeros_like(params.weights)
    wsum = 0.0
    for u in state.buffer:
        s = state.server_version - u.base_version
        if s > state.max_staleness:
            raise AggregationError(f"buffered update with staleness {s}")
        w = staleness_weight(s, state.staleness_exponent)
        acc += w * u.delta
        wsum += w
    state.buffer = []
    state.server_version += 1
    return ModelParams(params.weights + server_lr * (acc / wsum), params.version + 1)
