"""Slotted simulation of one edge server.

Each slot: admit tasks that arrived exactly at the boundary, drop doomed queue
heads, ask the policy for per-queue rates, then drain every queue FIFO at its
rate for one slot while inserting the rest of the slot's arrivals at their
true timestamps.  Unused allocation is forfeited.

Queues hold tasks in arrival order and only ever lose their head, so a queue
is a contiguous window ``[head, tail)`` over the per-type task index.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numba
import numpy as np

from .policies import _allocate_dynamic, _allocate_sharing, _weights
from .core import AllocationPlan, ContractError, EngineConfig, Outcome, Task
from .metrics import MetricsReport, TaskRecords, compute_report, drift_bound_constant
from .policies import PolicySetup, QueueObservation, make_policy
from .workload import ScenarioSpec, Workload, generate_workload

log = logging.getLogger("edgesim.engine")

DRIFT_WINDOW = 10_000
TRACE_EVENT_LIMIT = 1_000_000
MAX_DRAIN_SLOTS = 50_000_000
# service pieces are timed in absolute seconds, so the per-slot cycle sum
# carries rounding of order ulp(now) * f_max; plans themselves are exact
CAPACITY_RTOL = 1e-9

PENDING, COMPLETED, DROPPED = int(Outcome.PENDING), int(Outcome.COMPLETED), int(Outcome.DROPPED)


@numba.njit(cache=True)
def _drop_phase(now, f_max, noncausal, mean_cycles, order, off, head, tail,
                arr_time, deadline, required, executed, outcome, outcome_time):
    n_dropped = 0
    for k in range(head.shape[0]):
        while head[k] < tail[k]:
            i = order[off[k] + head[k]]
            if noncausal:
                rem = required[i] - executed[i]
            else:
                rem = max(mean_cycles[k] - executed[i], 0.0)
            if rem / f_max > max(arr_time[i] + deadline[i] - now, 0.0):
                outcome[i] = DROPPED
                outcome_time[i] = now
                head[k] += 1
                n_dropped += 1
            else:
                break
    return n_dropped


@numba.njit(cache=True)
def _exact_backlog(k, order, off, head, tail, required, executed):
    q = 0.0
    for p in range(head[k], tail[k]):
        i = order[off[k] + p]
        q += required[i] - executed[i]
    return q


@numba.njit(cache=True)
def _observe(t, slot, noncausal, exact_arrivals, mean_cycles, arrival_est, cum_arrived,
             order, off, head, tail, arr_time, arr_slot, deadline, required, executed,
             q_exact, backlog, arr_obs, dmin, avg_rate, nonempty):
    now = t * slot
    for k in range(head.shape[0]):
        n = tail[k] - head[k]
        nonempty[k] = n > 0
        q_exact[k] = _exact_backlog(k, order, off, head, tail, required, executed)
        d = np.inf
        for p in range(head[k], tail[k]):
            i = order[off[k] + p]
            d = min(d, arr_time[i] + deadline[i] - now)
        dmin[k] = d
        if noncausal:
            backlog[k] = q_exact[k]
        elif n == 0:
            backlog[k] = 0.0
        else:
            backlog[k] = max((n + 1) * mean_cycles[k] - executed[order[off[k] + head[k]]], 0.0)
        if exact_arrivals:
            a = 0.0
            p = tail[k]
            while off[k] + p < off[k + 1] and arr_slot[order[off[k] + p]] == t:
                a += required[order[off[k] + p]]
                p += 1
            arr_obs[k] = a
        else:
            arr_obs[k] = arrival_est[k]
        avg_rate[k] = cum_arrived[k] / (t * slot) if t > 0 else 0.0


@numba.njit(cache=True)
def _plan(code, f_max, V, q_ref, static_rates, order, off, head, tail,
          backlog, arr_obs, dmin, nonempty, weights, rates):
    if code == 0:
        _weights(q_ref, backlog, V, arr_obs, weights)
        _allocate_dynamic(backlog, dmin, nonempty, weights, f_max, rates)
    elif code == 1:
        rates[:] = 0.0
        best = -1
        best_i = -1
        for k in range(head.shape[0]):
            if head[k] < tail[k]:
                i = order[off[k] + head[k]]
                if best < 0 or i < best_i:
                    best = k
                    best_i = i
        if best >= 0:
            rates[best] = f_max
    elif code == 2:
        rates[:] = static_rates
    else:
        _allocate_sharing(nonempty, f_max, rates)


@numba.njit(cache=True)
def _admit(t, noncausal, mean_cycles, order, off, tail, arr_slot, required, cum_arrived):
    """Append every task of slot ``t`` to its queue."""
    for k in range(tail.shape[0]):
        while off[k] + tail[k] < off[k + 1]:
            i = order[off[k] + tail[k]]
            if arr_slot[i] > t:
                break
            cum_arrived[k] += required[i] if noncausal else mean_cycles[k]
            tail[k] += 1


@numba.njit(cache=True)
def _admit_boundary(now, noncausal, mean_cycles, order, off, tail, arr_time, required, cum_arrived):
    """Append tasks that arrived by ``now``, so the slot-start decisions see them."""
    for k in range(tail.shape[0]):
        while off[k] + tail[k] < off[k + 1]:
            i = order[off[k] + tail[k]]
            if arr_time[i] > now:
                break
            cum_arrived[k] += required[i] if noncausal else mean_cycles[k]
            tail[k] += 1


@numba.njit(cache=True)
def _serve(i, s, t_end, rate, arr_time, required, executed, outcome, outcome_time):
    """Serve task ``i`` from server time ``s``; returns (new s, finished)."""
    start = max(s, arr_time[i])
    if start >= t_end:
        return t_end, False
    rem = required[i] - executed[i]
    fin = start + rem / rate
    if fin <= t_end:
        executed[i] = required[i]
        outcome[i] = COMPLETED
        outcome_time[i] = fin
        return fin, True
    executed[i] += (t_end - start) * rate
    return t_end, False


@numba.njit(cache=True)
def _drain(t, slot, code, rates, order, off, head, tail,
           arr_time, required, executed, outcome, outcome_time):
    """Run one slot of service; returns cycles executed."""
    now = t * slot
    t_end = (t + 1) * slot
    done = 0.0
    if code == 1:
        rate = 0.0
        for k in range(rates.shape[0]):
            rate += rates[k]
        if rate <= 0.0:
            return 0.0
        s = now
        while s < t_end:
            best = -1
            best_i = -1
            for k in range(head.shape[0]):
                if head[k] < tail[k]:
                    i = order[off[k] + head[k]]
                    if best < 0 or i < best_i:
                        best = k
                        best_i = i
            if best < 0:
                break
            before = executed[best_i]
            s, fin = _serve(best_i, s, t_end, rate, arr_time, required, executed, outcome, outcome_time)
            done += executed[best_i] - before
            if not fin:
                break
            head[best] += 1
        return done
    for k in range(head.shape[0]):
        rate = rates[k]
        if rate <= 0.0:
            continue
        s = now
        while head[k] < tail[k] and s < t_end:
            i = order[off[k] + head[k]]
            before = executed[i]
            s, fin = _serve(i, s, t_end, rate, arr_time, required, executed, outcome, outcome_time)
            done += executed[i] - before
            if not fin:
                break
            head[k] += 1
    return done


@numba.njit(cache=True)
def _timeout_indicators(slot, backlog, arr_obs, rates, avg_rate, mean_deadline):
    n = 0
    for k in range(backlog.shape[0]):
        nxt = max(backlog[k] + arr_obs[k] - slot * rates[k], 0.0)
        t_est = nxt / avg_rate[k] if avg_rate[k] > 0 else 0.0
        if t_est - mean_deadline[k] > 0:
            n += 1
    return n


@numba.njit(cache=True)
def _run_slots(t0, t1, slot, f_max, code, drop, noncausal, exact_arrivals, V, B,
               mean_cycles, arrival_est, mean_deadline, q_ref, static_rates, cum_arrived,
               order, off, head, tail, arr_time, arr_slot, deadline, required,
               executed, outcome, outcome_time,
               plan_log, drift_log, stats, counters, max_backlog):
    """Advance slots ``t0..t1-1``; stops early once everything is resolved.

    stats: [lhs_sum, rhs_sum, executed_total]; counters: [capacity
    violations, drift violations, slots run].  Returns the next slot index.
    """
    K = head.shape[0]
    q_exact = np.empty(K)
    q_after = np.empty(K)
    backlog = np.empty(K)
    arr_obs = np.empty(K)
    dmin = np.empty(K)
    avg_rate = np.empty(K)
    weights = np.empty(K)
    rates = np.empty(K)
    nonempty = np.empty(K, dtype=np.bool_)
    log_plans = plan_log.shape[0] > 0
    log_drift = drift_log.shape[0] > 0
    for t in range(t0, t1):
        finished = True
        for k in range(K):
            if head[k] < tail[k] or off[k] + tail[k] < off[k + 1]:
                finished = False
        if finished:
            return t
        now = t * slot
        _admit_boundary(now, noncausal, mean_cycles, order, off, tail, arr_time, required, cum_arrived)
        if drop:
            _drop_phase(now, f_max, noncausal, mean_cycles, order, off, head, tail,
                        arr_time, deadline, required, executed, outcome, outcome_time)
        _observe(t, slot, noncausal, exact_arrivals, mean_cycles, arrival_est, cum_arrived,
                 order, off, head, tail, arr_time, arr_slot, deadline, required, executed,
                 q_exact, backlog, arr_obs, dmin, avg_rate, nonempty)
        _plan(code, f_max, V, q_ref, static_rates, order, off, head, tail,
              backlog, arr_obs, dmin, nonempty, weights, rates)
        total = 0.0
        for k in range(K):
            total += rates[k]
            if rates[k] < 0.0:
                counters[0] += 1
        if total > f_max:
            counters[0] += 1
        if log_plans:
            plan_log[t - t0, :] = rates
        _admit(t, noncausal, mean_cycles, order, off, tail, arr_slot, required, cum_arrived)
        done = _drain(t, slot, code, rates, order, off, head, tail,
                      arr_time, required, executed, outcome, outcome_time)
        if done > f_max * slot * (1.0 + CAPACITY_RTOL):
            counters[0] += 1
        stats[2] += done
        penalty = V * _timeout_indicators(slot, backlog, arr_obs, rates, avg_rate, mean_deadline)
        lhs = penalty
        rhs = B + penalty
        for k in range(K):
            q_after[k] = _exact_backlog(k, order, off, head, tail, required, executed)
            max_backlog[k] = max(max_backlog[k], q_after[k])
            lhs += 0.5 * ((q_after[k] - q_ref[k]) ** 2 - (q_exact[k] - q_ref[k]) ** 2)
            rhs += (q_exact[k] - q_ref[k]) * arrival_est[k] + (q_ref[k] - q_exact[k]) * rates[k] * slot
        stats[0] += lhs
        stats[1] += rhs
        if lhs > rhs:
            counters[1] += 1
        if log_drift:
            drift_log[t - t0, 0] = lhs
            drift_log[t - t0, 1] = rhs
        counters[2] += 1
    return t1


@dataclass
class TraceEvent:
    time: float
    kind: str
    task: Optional[int] = None
    plan: Optional[AllocationPlan] = None

    _RANK = {"Complete": 0, "Drop": 1, "SlotPlan": 2, "Arrive": 3}

    def sort_key(self):
        return (self.time, self._RANK[self.kind], -1 if self.task is None else self.task)


@dataclass
class DriftSummary:
    window_lhs: np.ndarray
    window_rhs: np.ndarray
    violations: int
    slots: int
    per_slot: Optional[np.ndarray] = None

    @property
    def violation_rate(self) -> float:
        return self.violations / self.slots if self.slots else 0.0


@dataclass
class RunResult:
    scenario: ScenarioSpec
    config: EngineConfig
    policy: PolicySetup
    records: TaskRecords
    metrics: MetricsReport
    n_slots: int
    drift: DriftSummary
    max_backlog: np.ndarray
    capacity_violations: int
    executed_total: float
    realized_load: float
    plans: Optional[np.ndarray] = None
    trace_hash: str = ""

    @property
    def overloaded(self) -> bool:
        return self.realized_load > 1.0

    def trace_events(self) -> Iterator[TraceEvent]:
        """Time-ordered events; needs ``plans`` for the SlotPlan rows."""
        rec = self.records
        events = []
        for i in range(len(rec)):
            events.append(TraceEvent(float(rec.arrival[i]), "Arrive", i))
            kind = "Complete" if rec.outcome[i] == COMPLETED else "Drop"
            events.append(TraceEvent(float(rec.outcome_time[i]), kind, i))
        if self.plans is not None:
            slot = self.config.slot
            for t, row in enumerate(self.plans):
                events.append(TraceEvent(t * slot, "SlotPlan", plan=AllocationPlan(tuple(row))))
        events.sort(key=TraceEvent.sort_key)
        return iter(events)

    def write_trace(self, path) -> None:
        rec = self.records
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "kind", "type_id", "task_seq", "required_cycles",
                        "executed_cycles", "deadline_s", "plan_f_k"])
            for ev in self.trace_events():
                if ev.kind == "SlotPlan":
                    w.writerow([repr(ev.time), ev.kind, "", "", "", "", "",
                                ";".join(repr(r) for r in ev.plan.rates)])
                    continue
                i = ev.task
                executed = repr(float(rec.executed[i])) if ev.kind != "Arrive" else ""
                w.writerow([repr(ev.time), ev.kind, int(rec.type_id[i]), i,
                            repr(float(rec.required[i])), executed, repr(float(rec.deadline[i])), ""])


class Simulator:
    """Mutable simulation state for one (scenario, config, policy) triple.

    ``run`` drives the compiled slot loop; ``drop_phase``, ``plan`` and
    ``advance_slot`` expose the same steps one at a time.
    """

    def __init__(self, scenario: ScenarioSpec, config: EngineConfig, policy: str | PolicySetup,
                 workload: Optional[Workload] = None, V: float = 2.0, a_max=None,
                 exact_arrivals: Optional[bool] = None):
        self.scenario = scenario.resolve(config.f_max)
        self.config = config
        specs = self.scenario.types
        if isinstance(policy, PolicySetup):
            self.policy = policy
        else:
            self.policy = make_policy(policy, specs, config, V=V, a_max=a_max, exact_arrivals=exact_arrivals)
        for name in ("f_max", "slot"):
            if not math.isfinite(getattr(config, name)):
                raise ContractError(f"{name} must be finite")
        if workload is None:
            workload = generate_workload(self.scenario, config.horizon_tasks, config.slot, config.seed)
        self.workload = workload
        K = len(specs)
        n = len(workload)
        self.K = K
        self.mean_cycles = np.array([s.mean_cycles for s in specs])
        self.arrival_est = np.array([s.rate * s.mean_cycles * config.slot for s in specs])
        self.mean_deadline = np.array([s.mean_deadline for s in specs])
        self.B = drift_bound_constant(config.f_max, config.slot, self.policy.a_max)
        self.arr_time = np.ascontiguousarray(workload.time, dtype=np.float64)
        self.arr_slot = np.ascontiguousarray(workload.slot_index, dtype=np.int64)
        self.deadline = np.ascontiguousarray(workload.deadline, dtype=np.float64)
        self.required = np.ascontiguousarray(workload.required, dtype=np.float64)
        self.type_id = np.ascontiguousarray(workload.type_id, dtype=np.int64)
        self.order = np.argsort(self.type_id, kind="stable").astype(np.int64)
        counts = np.bincount(self.type_id, minlength=K)[:K]
        self.off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.head = np.zeros(K, dtype=np.int64)
        self.tail = np.zeros(K, dtype=np.int64)
        self._reported_tail = np.zeros(K, dtype=np.int64)
        self.executed = np.zeros(n)
        self.outcome = np.zeros(n, dtype=np.int8)
        self.outcome_time = np.full(n, np.nan)
        self.cum_arrived = np.zeros(K)
        self.max_backlog = np.zeros(K)
        self.stats = np.zeros(3)
        self.counters = np.zeros(3, dtype=np.int64)
        self.t = 0
        self.weights_last = np.zeros(K)

    # -- one-step interface -------------------------------------------------

    @property
    def now(self) -> float:
        return self.t * self.config.slot

    def queue(self, k: int) -> list[int]:
        """Global task indices currently in queue ``k``, head first."""
        o = self.off[k]
        return [int(i) for i in self.order[o + self.head[k]: o + self.tail[k]]]

    def task(self, i: int) -> Task:
        return Task(
            int(self.type_id[i]), float(self.required[i]), float(self.deadline[i]),
            float(self.arr_time[i]), float(self.executed[i]), Outcome(int(self.outcome[i])),
            None if np.isnan(self.outcome_time[i]) else float(self.outcome_time[i]), seq=i,
        )

    def _admit_boundary(self) -> None:
        _admit_boundary(self.now, self.policy.noncausal, self.mean_cycles, self.order, self.off,
                        self.tail, self.arr_time, self.required, self.cum_arrived)

    def drop_phase(self, enabled: Optional[bool] = None) -> list[TraceEvent]:
        self._admit_boundary()
        enabled = self.policy.drop if enabled is None else enabled
        if not enabled:
            return []
        before = self.head.copy()
        _drop_phase(self.now, self.config.f_max, self.policy.noncausal, self.mean_cycles,
                    self.order, self.off, self.head, self.tail, self.arr_time, self.deadline,
                    self.required, self.executed, self.outcome, self.outcome_time)
        events = []
        for k in range(self.K):
            for p in range(before[k], self.head[k]):
                events.append(TraceEvent(self.now, "Drop", int(self.order[self.off[k] + p])))
        return events

    def _observation_arrays(self):
        K = self.K
        arrays = [np.empty(K) for _ in range(5)] + [np.empty(K, dtype=np.bool_)]
        self._admit_boundary()
        _observe(self.t, self.config.slot, self.policy.noncausal, self.policy.exact_arrivals,
                 self.mean_cycles, self.arrival_est, self.cum_arrived, self.order, self.off,
                 self.head, self.tail, self.arr_time, self.arr_slot, self.deadline,
                 self.required, self.executed, *arrays)
        return arrays

    def observe(self) -> list[QueueObservation]:
        _, backlog, arr, dmin, avg, nonempty = self._observation_arrays()
        return [QueueObservation(float(backlog[k]), float(arr[k]), float(dmin[k]), float(avg[k]),
                                 bool(nonempty[k])) for k in range(self.K)]

    def plan(self) -> AllocationPlan:
        _, backlog, arr, dmin, _, nonempty = self._observation_arrays()
        rates = np.empty(self.K)
        p = self.policy
        _plan(p.code, self.config.f_max, p.V, p.q_ref, p.static_rates, self.order, self.off,
              self.head, self.tail, backlog, arr, dmin, nonempty, self.weights_last, rates)
        return AllocationPlan(tuple(rates))

    def advance_slot(self, plan: AllocationPlan) -> list[TraceEvent]:
        """Admit this slot's arrivals and serve for one slot at ``plan``'s rates."""
        if len(plan) != self.K or not plan.within(self.config.f_max):
            raise ContractError("plan must have one rate per queue and respect f_max")
        t = self.t
        self._admit_boundary()
        tail0 = self._reported_tail.copy()
        head0 = self.head.copy()
        _admit(t, self.policy.noncausal, self.mean_cycles, self.order, self.off, self.tail,
               self.arr_slot, self.required, self.cum_arrived)
        _drain(t, self.config.slot, self.policy.code, np.array(plan.rates), self.order, self.off,
               self.head, self.tail, self.arr_time, self.required, self.executed, self.outcome,
               self.outcome_time)
        events = []
        for k in range(self.K):
            o = self.off[k]
            events += [TraceEvent(float(self.arr_time[i]), "Arrive", int(i))
                       for i in self.order[o + tail0[k]: o + self.tail[k]]]
            events += [TraceEvent(float(self.outcome_time[i]), "Complete", int(i))
                       for i in self.order[o + head0[k]: o + self.head[k]]]
        self._reported_tail = self.tail.copy()
        self.t += 1
        events.sort(key=TraceEvent.sort_key)
        return events

    def step(self) -> list[TraceEvent]:
        events = self.drop_phase()
        plan = self.plan()
        events.append(TraceEvent(self.now, "SlotPlan", plan=plan))
        return events + self.advance_slot(plan)

    # -- batch interface ----------------------------------------------------

    def run(self, trace: bool = False, drift_per_slot: bool = False) -> RunResult:
        cfg, p = self.config, self.policy
        last_slot = int(self.arr_slot[-1]) if len(self.arr_slot) else -1
        limit = last_slot + 1 + MAX_DRAIN_SLOTS
        plans, window_lhs, window_rhs, drift_slots = [], [], [], []
        empty2 = np.empty((0, 2))
        while True:
            t0 = self.t
            t1 = min(t0 + DRIFT_WINDOW, limit)
            plan_log = np.empty((t1 - t0, self.K)) if trace else np.empty((0, self.K))
            drift_log = np.empty((t1 - t0, 2)) if drift_per_slot else empty2
            lhs0, rhs0 = self.stats[0], self.stats[1]
            self.stats[0] = self.stats[1] = 0.0
            t = _run_slots(t0, t1, cfg.slot, cfg.f_max, p.code, p.drop, p.noncausal,
                           p.exact_arrivals, p.V, self.B, self.mean_cycles, self.arrival_est,
                           self.mean_deadline, p.q_ref, p.static_rates, self.cum_arrived,
                           self.order, self.off, self.head, self.tail, self.arr_time,
                           self.arr_slot, self.deadline, self.required, self.executed,
                           self.outcome, self.outcome_time, plan_log, drift_log, self.stats,
                           self.counters, self.max_backlog)
            n = t - t0
            if n:
                window_lhs.append(self.stats[0] / n)
                window_rhs.append(self.stats[1] / n)
            self.stats[0], self.stats[1] = lhs0 + self.stats[0], rhs0 + self.stats[1]
            if trace:
                plans.append(plan_log[:n])
            if drift_per_slot:
                drift_slots.append(drift_log[:n])
            self.t = t
            if t < t1:
                break
            if t >= limit:
                raise RuntimeError("queues failed to drain; the scenario is overloaded beyond recovery")
        return self._result(plans if trace else None, window_lhs, window_rhs,
                            drift_slots if drift_per_slot else None)

    def records(self) -> TaskRecords:
        return TaskRecords(self.type_id, self.arr_time, self.deadline, self.required,
                           self.executed, self.outcome, self.outcome_time)

    def _result(self, plans, window_lhs, window_rhs, drift_slots) -> RunResult:
        cfg = self.config
        rec = self.records()
        n_slots = int(self.counters[2])
        weights = [s.rate for s in self.scenario.types]
        report = compute_report(rec, weights, cfg.f_max, int(self.counters[1]), n_slots)
        plan_arr = np.concatenate(plans) if plans else (np.empty((0, self.K)) if plans is not None else None)
        if plan_arr is not None and 2 * len(rec) + len(plan_arr) > TRACE_EVENT_LIMIT:
            log.info("trace has more than %d events; plan rows are kept anyway because they were requested",
                     TRACE_EVENT_LIMIT)
        h = hashlib.sha256()
        for a in (self.executed, self.outcome, self.outcome_time):
            h.update(np.ascontiguousarray(a).tobytes())
        if plan_arr is not None:
            h.update(plan_arr.tobytes())
        realized = self.scenario.total_load / cfg.f_max
        if realized > 1.0:
            log.warning("offered load %.3f exceeds capacity", realized)
        return RunResult(
            scenario=self.scenario, config=cfg, policy=self.policy, records=rec, metrics=report,
            n_slots=n_slots,
            drift=DriftSummary(np.array(window_lhs), np.array(window_rhs), int(self.counters[1]),
                               n_slots, np.concatenate(drift_slots) if drift_slots else None),
            max_backlog=self.max_backlog.copy(), capacity_violations=int(self.counters[0]),
            executed_total=float(self.stats[2]), realized_load=realized, plans=plan_arr,
            trace_hash=h.hexdigest(),
        )


def run(scenario: ScenarioSpec, config: EngineConfig, policy: str, trace: bool = False,
        V: float = 2.0, a_max=None, exact_arrivals: Optional[bool] = None) -> RunResult:
    """Simulate ``config.horizon_tasks`` arrivals and drain the queues."""
    sim = Simulator(scenario, config, policy, V=V, a_max=a_max, exact_arrivals=exact_arrivals)
    return sim.run(trace=trace)
