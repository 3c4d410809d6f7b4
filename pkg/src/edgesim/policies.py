"""Per-slot computation-resource allocation policies.

The array-level functions (leading underscore) are numba-compiled and are
what the engine calls inside its slot loop.  The public functions wrap them
for use on plain Python values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .core import AllocationPlan, Causality, ContractError, EngineConfig, TaskTypeSpec, lyapunov

POLICY_NAMES = ("dynamic", "dynamic-nodrop", "dynamic-noncausal", "sequential", "parallel", "sharing")

# integer codes understood by the engine kernel
DYNAMIC, SEQUENTIAL, PARALLEL, SHARING = 0, 1, 2, 3


@numba.njit(cache=True)
def _fit_capacity(rates, f_max):
    """Shave rounding excess so that the index-order sum is <= f_max."""
    s = 0.0
    for r in rates:
        s += r
    while s > f_max:
        j = np.argmax(rates)
        rates[j] = max(np.nextafter(rates[j] - (s - f_max), 0.0), 0.0)
        s = 0.0
        for r in rates:
            s += r
    return rates


@numba.njit(cache=True)
def _allocate_dynamic(backlog, min_deadline, nonempty, weights, f_max, out):
    out[:] = 0.0
    order = np.argsort(weights, kind="mergesort")
    f_remain = f_max
    for j in range(order.shape[0]):
        k = order[j]
        if not nonempty[k]:
            continue
        if f_remain <= 0.0:
            break
        if min_deadline[k] <= 0.0:
            out[k] = f_remain
        else:
            out[k] = min(backlog[k] / min_deadline[k], f_remain)
        f_remain -= out[k]
    return _fit_capacity(out, f_max)


@numba.njit(cache=True)
def _allocate_sharing(nonempty, f_max, out):
    out[:] = 0.0
    n = 0
    for k in range(nonempty.shape[0]):
        if nonempty[k]:
            n += 1
    if n == 0:
        return out
    share = f_max / n
    for k in range(nonempty.shape[0]):
        if nonempty[k]:
            out[k] = share
    return _fit_capacity(out, f_max)


@numba.njit(cache=True)
def _weights(q_ref, backlog, V, arrival_estimate, out):
    for k in range(q_ref.shape[0]):
        out[k] = (q_ref[k] - backlog[k]) + V * (backlog[k] + arrival_estimate[k])
    return out


@numba.njit(cache=True)
def _should_drop(head_remaining, time_to_deadline, f_max):
    return head_remaining / f_max > max(time_to_deadline, 0.0)


def compute_reference_level(delta_max: float, f_max: float, a_max: float) -> float:
    """Target backlog: the largest queue still drainable by the loosest deadline,
    less one slot of peak arrivals.  Never negative."""
    if min(delta_max, f_max, a_max) < 0:
        raise ContractError("reference level inputs must be >= 0")
    return max(delta_max * f_max - a_max, 0.0)


def default_a_max(spec: TaskTypeSpec, slot: float) -> float:
    """Per-slot arrival cap: ceil(lambda*tau) maximal tasks, at least one."""
    n = max(1, math.ceil(spec.rate * slot))
    return n * (1.0 + spec.ci_variation) * spec.mean_cycles


def compute_weight(q_ref: float, backlog: float, V: float, arrival_estimate: float) -> float:
    return (q_ref - backlog) + V * (backlog + arrival_estimate)


def should_drop(head_remaining: float, time_to_deadline: float, f_max: float) -> bool:
    """True when the head cannot finish in time even with the whole server."""
    if head_remaining < 0:
        raise ContractError("head_remaining must be >= 0")
    return bool(_should_drop(float(head_remaining), float(time_to_deadline), float(f_max)))


@dataclass(frozen=True)
class QueueObservation:
    backlog: float
    arrival_estimate: float = 0.0
    min_remaining_deadline: float = math.inf
    avg_rate: float = 0.0
    nonempty: bool = True

    def __post_init__(self):
        if self.backlog < 0:
            raise ContractError("observed backlog must be >= 0")


@dataclass
class DynamicPolicyState:
    V: float
    q_ref: np.ndarray
    a_max: np.ndarray
    weights_last: np.ndarray = field(default=None)

    def __post_init__(self):
        self.q_ref = np.asarray(self.q_ref, dtype=np.float64)
        self.a_max = np.asarray(self.a_max, dtype=np.float64)
        if self.V < 0 or (self.q_ref < 0).any():
            raise ContractError("V and q_ref must be >= 0")
        if self.weights_last is None:
            self.weights_last = np.zeros_like(self.q_ref)

    def lyapunov(self, backlogs: Sequence[float]) -> float:
        return lyapunov(backlogs, self.q_ref)


def _obs_arrays(obs: Sequence[QueueObservation]):
    backlog = np.array([o.backlog for o in obs], dtype=np.float64)
    arr = np.array([o.arrival_estimate for o in obs], dtype=np.float64)
    dmin = np.array([o.min_remaining_deadline for o in obs], dtype=np.float64)
    nonempty = np.array([o.nonempty for o in obs], dtype=np.bool_)
    return backlog, arr, dmin, nonempty


def allocate_dynamic(obs: Sequence[QueueObservation], state: DynamicPolicyState, f_max: float) -> AllocationPlan:
    """Greedy allocation in ascending weight order (ties by queue index)."""
    if f_max <= 0:
        raise ContractError("f_max must be positive")
    backlog, arr, dmin, nonempty = _obs_arrays(obs)
    w = _weights(state.q_ref, backlog, float(state.V), arr, np.empty(len(obs)))
    state.weights_last = w
    out = _allocate_dynamic(backlog, dmin, nonempty, w, float(f_max), np.empty(len(obs)))
    return AllocationPlan(tuple(out))


def allocate_sequential(oldest_type: Optional[int], n_queues: int, f_max: float) -> AllocationPlan:
    """The queue holding the globally oldest pending task gets the whole server."""
    rates = [0.0] * n_queues
    if oldest_type is not None:
        rates[oldest_type] = float(f_max)
    return AllocationPlan(tuple(rates))


def parallel_shares(specs: Sequence[TaskTypeSpec]) -> np.ndarray:
    loads = np.array([s.load for s in specs], dtype=np.float64)
    total = loads.sum()
    if not total > 0:
        raise ContractError("parallel allocation needs a positive total load")
    return loads / total


def allocate_parallel(specs: Sequence[TaskTypeSpec], f_max: float) -> AllocationPlan:
    rates = _fit_capacity(parallel_shares(specs) * f_max, float(f_max))
    return AllocationPlan(tuple(rates))


def allocate_sharing(obs: Sequence[QueueObservation], f_max: float) -> AllocationPlan:
    nonempty = np.array([o.nonempty for o in obs], dtype=np.bool_)
    return AllocationPlan(tuple(_allocate_sharing(nonempty, float(f_max), np.empty(len(obs)))))


@dataclass(frozen=True)
class PolicySetup:
    """Everything the engine needs to run one named policy on one scenario."""

    name: str
    code: int
    drop: bool
    noncausal: bool
    exact_arrivals: bool
    V: float
    q_ref: np.ndarray
    a_max: np.ndarray
    static_rates: np.ndarray

    @property
    def is_dynamic(self) -> bool:
        return self.code == DYNAMIC


def make_policy(
    name: str,
    specs: Sequence[TaskTypeSpec],
    config: EngineConfig,
    V: float = 2.0,
    a_max: Optional[Sequence[float]] = None,
    exact_arrivals: Optional[bool] = None,
) -> PolicySetup:
    """Resolve a policy name into engine settings.

    Non-causal variants observe exact backlogs and, unless ``exact_arrivals``
    is False, the realized per-slot arrivals instead of the mean estimate.
    """
    if name not in POLICY_NAMES:
        raise ContractError(f"unknown policy {name!r}; valid: {', '.join(POLICY_NAMES)}")
    if V < 0:
        raise ContractError("V must be >= 0")
    if a_max is None:
        a_max = [default_a_max(s, config.slot) for s in specs]
    a_max = np.asarray(a_max, dtype=np.float64)
    if a_max.shape != (len(specs),) or (a_max < 0).any():
        raise ContractError("a_max needs one nonnegative value per type")
    q_ref = np.array([compute_reference_level(s.max_deadline, config.f_max, a) for s, a in zip(specs, a_max)])
    static = np.zeros(len(specs))
    code = {"sequential": SEQUENTIAL, "parallel": PARALLEL, "sharing": SHARING}.get(name, DYNAMIC)
    if code == PARALLEL:
        static = np.array(allocate_parallel(specs, config.f_max).rates)
    noncausal = name == "dynamic-noncausal" or (
        code == DYNAMIC and config.causality is Causality.NONCAUSAL
    )
    return PolicySetup(
        name=name, code=code, drop=name != "dynamic-nodrop" and code == DYNAMIC,
        noncausal=noncausal,
        exact_arrivals=noncausal if exact_arrivals is None else bool(exact_arrivals) and noncausal, V=float(V),
        q_ref=q_ref, a_max=a_max, static_rates=static,
    )
