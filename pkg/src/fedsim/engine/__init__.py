"""Discrete-event engine: scheduling, aggregation, execution and checkpoints."""

from .aggregate import (AggregationError, BufferAggState, fedavg_aggregate, fedbuff_aggregate,
                        staleness_weight)
from .checkpoint import CheckpointError, CheckpointMismatch, load_checkpoint, save_checkpoint
from .scheduler import (END, START, AsyncScheduler, ClientTask, Outcome, RoundPlan,
                        SchedulerInvariantError, classify_outcome, default_deadline, sync_round,
                        task_duration)
from .simulation import (EvalSet, ScheduleConfig, SimResult, Simulation, SimulationError,
                         make_duration_fn)
from .workers import TrainJob, WorkerCrashed, WorkerPool

__all__ = [
    "END", "START", "AggregationError", "AsyncScheduler", "BufferAggState", "CheckpointError",
    "CheckpointMismatch", "ClientTask", "EvalSet", "Outcome", "RoundPlan", "ScheduleConfig",
    "SchedulerInvariantError", "SimResult", "Simulation", "SimulationError", "TrainJob",
    "WorkerCrashed", "WorkerPool", "classify_outcome", "default_deadline", "fedavg_aggregate",
    "fedbuff_aggregate", "load_checkpoint", "make_duration_fn", "save_checkpoint",
    "staleness_weight", "sync_round", "task_duration",
]
