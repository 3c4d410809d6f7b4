"""Slotted simulator of deadline-aware CPU allocation at a mobile edge server."""
from .core import (
    AllocationPlan,
    Arrival,
    Causality,
    ContractError,
    EngineConfig,
    QueueState,
    Task,
    TaskTypeSpec,
)
from .engine import RunResult, Simulator, run
from .policies import POLICY_NAMES
from .workload import ScenarioSpec

__version__ = "0.1.0"
