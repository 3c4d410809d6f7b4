"""Domain types and the elementary queue-mechanics formulas.

All cycle and time quantities are plain floats (cycles, seconds, cycles/s).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence


class ContractError(ValueError):
    """An argument violates the documented precondition of an operation."""


class Arrival(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    POISSON = "poisson"


class Causality(str, enum.Enum):
    CAUSAL = "causal"
    NONCAUSAL = "noncausal"


class Outcome(enum.IntEnum):
    PENDING = 0
    COMPLETED = 1
    DROPPED = 2


def _finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ContractError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class TaskTypeSpec:
    """Static description of one service class.

    ``mean_cycles`` is ``data_size * mean_ci``.  The rate of the class is
    ``md_count * per_md_rate``; a rate of zero marks an inactive class.
    ``phase`` only matters for deterministic arrivals: ``"random"`` draws an
    independent offset per device, ``"staggered"`` spaces the devices evenly.
    """

    id: int
    data_size: float
    mean_ci: float
    ci_variation: float
    deadline_range: tuple[float, float]
    arrival: Arrival = Arrival.DETERMINISTIC
    md_count: int = 1
    per_md_rate: float = 25.0
    phase: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "arrival", Arrival(self.arrival))
        object.__setattr__(self, "deadline_range", tuple(float(x) for x in self.deadline_range))
        for name in ("data_size", "mean_ci", "ci_variation", "per_md_rate"):
            _finite(name, getattr(self, name))
        lo, hi = self.deadline_range
        _finite("deadline_range", lo)
        _finite("deadline_range", hi)
        if self.id < 0:
            raise ContractError("type id must be >= 0")
        if self.data_size <= 0 or self.mean_ci <= 0:
            raise ContractError("data_size and mean_ci must be positive")
        if not 0.0 <= self.ci_variation < 1.0:
            raise ContractError(f"ci_variation must be in [0, 1), got {self.ci_variation}")
        if not 0.0 < lo <= hi:
            raise ContractError(f"deadline_range must satisfy 0 < lo <= hi, got {self.deadline_range}")
        if self.md_count < 1:
            raise ContractError("md_count must be >= 1")
        if self.per_md_rate < 0:
            raise ContractError("per_md_rate must be >= 0")
        if self.phase not in ("random", "staggered"):
            raise ContractError(f"unknown phase mode {self.phase!r}")

    @property
    def mean_cycles(self) -> float:
        return self.data_size * self.mean_ci

    @property
    def rate(self) -> float:
        return self.md_count * self.per_md_rate

    @property
    def mean_deadline(self) -> float:
        lo, hi = self.deadline_range
        return 0.5 * (lo + hi)

    @property
    def max_deadline(self) -> float:
        return self.deadline_range[1]

    @property
    def load(self) -> float:
        """Mean arriving cycles per second."""
        return self.rate * self.mean_cycles


@dataclass
class Task:
    type_id: int
    required_cycles: float
    deadline: float
    arrival_time: float
    executed_cycles: float = 0.0
    outcome: Outcome = Outcome.PENDING
    outcome_time: Optional[float] = None
    seq: int = 0

    @property
    def remaining(self) -> float:
        return self.required_cycles - self.executed_cycles

    @property
    def expiry(self) -> float:
        return self.arrival_time + self.deadline


@dataclass
class QueueState:
    """FIFO backlog of one task type."""

    type_id: int
    fifo: list[Task] = field(default_factory=list)
    cumulative_arrived_cycles: float = 0.0
    slots_elapsed: int = 0

    @property
    def task_count(self) -> int:
        return len(self.fifo)

    @property
    def exact_backlog(self) -> float:
        return sum(t.remaining for t in self.fifo)

    @property
    def head_executed(self) -> float:
        return self.fifo[0].executed_cycles if self.fifo else 0.0


@dataclass(frozen=True)
class EngineConfig:
    f_max: float = 3e10
    slot: float = 1e-3
    horizon_tasks: int = 100_000
    seed: int = 0
    causality: Causality = Causality.CAUSAL

    def __post_init__(self):
        object.__setattr__(self, "causality", Causality(self.causality))
        _finite("f_max", self.f_max)
        _finite("slot", self.slot)
        if self.f_max <= 0:
            raise ContractError("f_max must be positive")
        if self.slot <= 0:
            raise ContractError("slot must be positive")
        if self.horizon_tasks <= 0:
            raise ContractError("horizon_tasks must be positive")


@dataclass(frozen=True)
class AllocationPlan:
    """Per-queue compute rates for one slot.

    The capacity check sums the rates left to right in queue order, which is
    the same order the engine uses when it enforces the limit.
    """

    rates: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if any(r < 0 or not math.isfinite(r) for r in self.rates):
            raise ContractError(f"rates must be finite and >= 0: {self.rates}")

    @property
    def total(self) -> float:
        s = 0.0
        for r in self.rates:
            s += r
        return s

    def within(self, f_max: float) -> bool:
        return self.total <= f_max

    def as_dict(self) -> dict[int, float]:
        return dict(enumerate(self.rates))

    def __getitem__(self, k: int) -> float:
        return self.rates[k]

    def __len__(self) -> int:
        return len(self.rates)


def _nonneg(**kwargs: float) -> None:
    for name, v in kwargs.items():
        if not v >= 0:
            raise ContractError(f"{name} must be >= 0, got {v!r}")


def update_backlog(q: float, arrivals: float, service: float) -> float:
    """One step of the backlog recursion, clamped at zero."""
    _nonneg(q=q, arrivals=arrivals, service=service)
    return max(q + arrivals - service, 0.0)


def estimate_arrival_load(lambda_k: float, mean_cycles: float, slot: float) -> float:
    """Expected cycles arriving in one slot."""
    _nonneg(lambda_k=lambda_k, mean_cycles=mean_cycles, slot=slot)
    return lambda_k * mean_cycles * slot


def estimate_sojourn(next_backlog: float, avg_rate: float) -> float:
    """Little's-law sojourn estimate; zero while no traffic has been seen."""
    _nonneg(next_backlog=next_backlog, avg_rate=avg_rate)
    if avg_rate == 0:
        return 0.0
    return next_backlog / avg_rate


def estimate_backlog(n: int, mean_cycles: float, head_executed: float) -> float:
    """Backlog estimate from the task count, ``(n + 1) * mean - head_executed``.

    ``n`` counts every queued task including the one in service.  The extra
    mean-sized task keeps the estimate positive while the head is unfinished,
    even when it has already run past the mean.  An empty queue estimates 0.
    """
    _nonneg(n=n, mean_cycles=mean_cycles, head_executed=head_executed)
    if n == 0:
        return 0.0
    return max((n + 1) * mean_cycles - head_executed, 0.0)


def running_avg_rate(cumulative_cycles: float, elapsed_slots: int, slot: float) -> float:
    _nonneg(cumulative_cycles=cumulative_cycles, elapsed_slots=elapsed_slots)
    if elapsed_slots == 0:
        return 0.0
    return cumulative_cycles / (elapsed_slots * slot)


def lyapunov(backlogs: Sequence[float], q_ref: Sequence[float]) -> float:
    """Half the squared distance of the backlog vector from the reference."""
    return 0.5 * sum((b - q) ** 2 for b, q in zip(backlogs, q_ref))
