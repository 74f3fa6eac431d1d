"""Heterogeneity-aware task allocation for ring-allreduce data-parallel training."""

from .allocator import (
    apportion,
    increments_closed_form,
    increments_linear_system,
    is_stable,
    rates,
    update_allocation,
)
from .collective import RingPosition, allgather_scalar, ring_allreduce
from .core import (
    AllocationState,
    CostModel,
    EpochReport,
    EpochTiming,
    ExperimentConfig,
    GradientBuffer,
    RunMode,
    WorkerProfile,
    validate,
)
from .engine import allreduce_time, compute_time, run_epoch, run_experiment, run_worker, waiting_times
from .metrics import ExperimentReport, speedup, write_csv, write_json

__version__ = "0.1.0"

__all__ = [
    "AllocationState",
    "CostModel",
    "EpochReport",
    "EpochTiming",
    "ExperimentConfig",
    "ExperimentReport",
    "GradientBuffer",
    "RingPosition",
    "RunMode",
    "WorkerProfile",
    "allgather_scalar",
    "allreduce_time",
    "apportion",
    "compute_time",
    "increments_closed_form",
    "increments_linear_system",
    "is_stable",
    "rates",
    "ring_allreduce",
    "run_epoch",
    "run_experiment",
    "run_worker",
    "speedup",
    "update_allocation",
    "validate",
    "waiting_times",
    "write_csv",
    "write_json",
]
