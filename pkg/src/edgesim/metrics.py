"""Timeout, waste and drift-diagnostic metrics of simulation runs."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import ContractError, Outcome

# completions this close past the deadline are rounding noise, not misses
DEADLINE_TOL = 1e-9


@dataclass
class TaskRecords:
    """Per-task outcome columns of one run, indexed by global arrival order."""

    type_id: np.ndarray
    arrival: np.ndarray
    deadline: np.ndarray
    required: np.ndarray
    executed: np.ndarray
    outcome: np.ndarray
    outcome_time: np.ndarray

    def __len__(self) -> int:
        return len(self.type_id)

    @classmethod
    def empty(cls) -> "TaskRecords":
        f = np.empty(0)
        return cls(np.empty(0, dtype=np.int64), f, f, f, f, np.empty(0, dtype=np.int8), f)

    def sojourn(self) -> np.ndarray:
        return self.outcome_time - self.arrival

    def timed_out(self) -> np.ndarray:
        if (self.outcome == Outcome.PENDING).any():
            raise ContractError("every task must be resolved before computing timeouts")
        late = (self.outcome == Outcome.COMPLETED) & (self.sojourn() > self.deadline + DEADLINE_TOL)
        return (self.outcome == Outcome.DROPPED) | late


@dataclass
class MetricsReport:
    per_type_timeout: dict[int, float]
    weighted_timeout: float
    waste_fraction: float
    task_counts: dict[int, tuple[int, int, int]]
    mean_sojourn: dict[int, float]
    drift_bound_violations: int = 0
    drift_violation_rate: float = 0.0
    t_sim: float = 0.0

    def arrivals(self, k: int) -> int:
        return sum(self.task_counts.get(k, (0, 0, 0)))

    @property
    def total_tasks(self) -> int:
        return sum(sum(c) for c in self.task_counts.values())

    @property
    def total_dropped(self) -> int:
        return sum(c[2] for c in self.task_counts.values())


def timeout_probability(records: TaskRecords, weights: Mapping[int, float] | Sequence[float]):
    """Per-type timeout fractions and their rate-weighted average.

    Types without arrivals are left out of both the per-type map and the
    weighted sum; the remaining weights are renormalized.
    """
    if not isinstance(weights, Mapping):
        weights = dict(enumerate(weights))
    to = records.timed_out()
    per_type = {}
    for k in sorted(weights):
        mask = records.type_id == k
        n = int(mask.sum())
        if n:
            per_type[k] = int(to[mask].sum()) / n
    wsum = sum(weights[k] for k in per_type)
    if not per_type or wsum <= 0:
        return per_type, 0.0
    weighted = sum(weights[k] / wsum * p for k, p in per_type.items())
    return per_type, weighted


def waste_fraction(records: TaskRecords, f_max: float, t_sim: float) -> float:
    """Share of total capacity spent on tasks that end up timing out."""
    if not t_sim > 0:
        raise ContractError("t_sim must be positive")
    to = records.timed_out()
    return float(records.executed[to].sum()) / (f_max * t_sim)


def simulated_time(records: TaskRecords) -> float:
    """Time of the last completion or drop."""
    return float(records.outcome_time.max()) if len(records) else 0.0


def drift_bound_constant(f_max: float, slot: float, a_max: Sequence[float]) -> float:
    return 0.5 * ((slot * f_max) ** 2 + sum(a * a for a in a_max))


def drift_diagnostic(
    q_before: Sequence[float],
    q_after: Sequence[float],
    q_ref: Sequence[float],
    V: float,
    timeout_indicator_sum: int,
    arrival_estimate: Sequence[float],
    rates: Sequence[float],
    slot: float,
    B: float,
):
    """Realized one-slot drift-plus-penalty against its upper bound.

    Returns ``(lhs, rhs, violated)``.  The bound holds for the conditional
    expectation, so single slots may violate it.
    """
    def L(q):
        return 0.5 * sum((a - b) ** 2 for a, b in zip(q, q_ref))

    penalty = V * timeout_indicator_sum
    lhs = L(q_after) - L(q_before) + penalty
    rhs = B + penalty
    for qb, qr, a, f in zip(q_before, q_ref, arrival_estimate, rates):
        rhs += (qb - qr) * a + (qr - qb) * f * slot
    return lhs, rhs, lhs > rhs


def compute_report(
    records: TaskRecords,
    weights: Sequence[float],
    f_max: float,
    drift_violations: int = 0,
    n_slots: int = 0,
) -> MetricsReport:
    per_type, weighted = timeout_probability(records, weights)
    t_sim = simulated_time(records)
    waste = waste_fraction(records, f_max, t_sim) if t_sim > 0 else 0.0
    to = records.timed_out() if len(records) else np.zeros(0, dtype=bool)
    counts, sojourn = {}, {}
    done = records.outcome == Outcome.COMPLETED
    dropped = records.outcome == Outcome.DROPPED
    for k in range(len(weights)):
        mask = records.type_id == k
        if not mask.any():
            continue
        counts[k] = (
            int((mask & done & ~to).sum()),
            int((mask & done & to).sum()),
            int((mask & dropped).sum()),
        )
        c = mask & done
        sojourn[k] = float(records.sojourn()[c].mean()) if c.any() else math.nan
    return MetricsReport(
        per_type_timeout=per_type,
        weighted_timeout=weighted,
        waste_fraction=waste,
        task_counts=counts,
        mean_sojourn=sojourn,
        drift_bound_violations=drift_violations,
        drift_violation_rate=drift_violations / n_slots if n_slots else 0.0,
        t_sim=t_sim,
    )


def records_from_trace_csv(path) -> TaskRecords:
    """Rebuild per-task records from an exported trace (plan rows are skipped)."""
    rows: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["kind"] == "SlotPlan":
                continue
            rec = rows.setdefault(int(r["task_seq"]), {})
            if r["kind"] == "Arrive":
                rec.update(type_id=int(r["type_id"]), arrival=float(r["time_s"]),
                           deadline=float(r["deadline_s"]), required=float(r["required_cycles"]))
            else:
                rec.update(executed=float(r["executed_cycles"]), outcome_time=float(r["time_s"]),
                           outcome=Outcome.COMPLETED if r["kind"] == "Complete" else Outcome.DROPPED)
    seqs = sorted(rows)

    def col(name, dtype, default=0):
        return np.array([rows[s].get(name, default) for s in seqs], dtype=dtype)

    return TaskRecords(
        type_id=col("type_id", np.int64), arrival=col("arrival", np.float64),
        deadline=col("deadline", np.float64), required=col("required", np.float64),
        executed=col("executed", np.float64), outcome=col("outcome", np.int8, Outcome.PENDING),
        outcome_time=col("outcome_time", np.float64, math.nan),
    )


@dataclass
class Summary:
    mean: float
    std: float
    n: int


def summarize(values: Iterable[float]) -> Summary:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return Summary(math.nan, math.nan, 0)
    return Summary(float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, int(v.size))
