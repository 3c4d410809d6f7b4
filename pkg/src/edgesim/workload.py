"""Task arrival generation and scenario rate derivation."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import Arrival, ContractError, Task, TaskTypeSpec


class Derivation(str, enum.Enum):
    EXPLICIT = "explicit"
    FROM_LOAD_RATIO = "from_load_ratio"


@dataclass(frozen=True)
class ScenarioSpec:
    types: tuple[TaskTypeSpec, ...]
    load_fraction: float = 0.9
    load_ratio: tuple[float, ...] = ()
    derivation: Derivation = Derivation.FROM_LOAD_RATIO
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "load_ratio", tuple(float(r) for r in self.load_ratio))
        object.__setattr__(self, "derivation", Derivation(self.derivation))
        if not self.types:
            raise ContractError("scenario needs at least one task type")
        if [t.id for t in self.types] != list(range(len(self.types))):
            raise ContractError("task type ids must be 0..K-1 in order")
        if not (math.isfinite(self.load_fraction) and 0 < self.load_fraction <= 1.5):
            raise ContractError(f"load_fraction must be in (0, 1.5], got {self.load_fraction}")
        if self.derivation is Derivation.FROM_LOAD_RATIO and len(self.load_ratio) != len(self.types):
            raise ContractError("load_ratio needs one weight per task type")

    def with_ci_variation(self, v: float) -> "ScenarioSpec":
        return replace(self, types=tuple(replace(t, ci_variation=v) for t in self.types))

    def with_ratio(self, ratio: Sequence[float], load_fraction: Optional[float] = None) -> "ScenarioSpec":
        return replace(
            self,
            load_ratio=tuple(ratio),
            load_fraction=self.load_fraction if load_fraction is None else load_fraction,
            derivation=Derivation.FROM_LOAD_RATIO,
        )

    def resolve(self, f_max: float) -> "ScenarioSpec":
        """Return an explicit scenario whose MD counts realize the load ratio."""
        if self.derivation is Derivation.EXPLICIT:
            return self
        rates = derive_rates(self, f_max)
        types = tuple(replace(t, md_count=md) for t, (_, md) in zip(self.types, rates))
        return replace(self, types=types, derivation=Derivation.EXPLICIT)

    @property
    def total_load(self) -> float:
        return sum(t.load for t in self.types)


@dataclass(frozen=True)
class ArrivalEvent:
    time: float
    task: Task


def derive_rates(spec: ScenarioSpec, f_max: float) -> list[tuple[float, int]]:
    """Per-type (arrival rate, MD count) hitting ``load_fraction * f_max``.

    The load of each type is proportional to its ratio weight.  MD counts are
    rounded to integers, so the returned rates are ``md_count * per_md_rate``
    and the realized load may differ from the target by one MD per type.
    """
    if spec.derivation is not Derivation.FROM_LOAD_RATIO:
        raise ContractError("derive_rates requires derivation = from_load_ratio")
    if any(not (r > 0 and math.isfinite(r)) for r in spec.load_ratio):
        raise ContractError(f"load ratio weights must be positive, got {spec.load_ratio}")
    total_w = sum(spec.load_ratio)
    out = []
    for t, w in zip(spec.types, spec.load_ratio):
        target = spec.load_fraction * f_max * w / total_w / t.mean_cycles
        if t.per_md_rate <= 0:
            raise ContractError(f"type {t.id}: per_md_rate must be positive to derive rates")
        md = max(1, int(round(target / t.per_md_rate)))
        out.append((md * t.per_md_rate, md))
    return out


def sample_required_cycles(mean_cycles: float, v: float, rng: np.random.Generator, size=None):
    if not 0 <= v < 1:
        raise ContractError(f"ci variation must be in [0, 1), got {v}")
    return rng.uniform((1.0 - v) * mean_cycles, (1.0 + v) * mean_cycles, size)


def sample_deadline(lo: float, hi: float, rng: np.random.Generator, size=None):
    if lo > hi:
        raise ContractError(f"deadline range inverted: [{lo}, {hi}]")
    return rng.uniform(lo, hi, size)


def slot_of(times, slot: float):
    """Index of the slot containing each time; the one rule used everywhere."""
    return np.floor(np.asarray(times, dtype=np.float64) / slot).astype(np.int64)


def type_streams(seed: int, type_id: int) -> tuple[np.random.Generator, ...]:
    """Independent (arrival, cycles, deadline) generators for one type."""
    ss = np.random.SeedSequence(seed, spawn_key=(type_id,))
    return tuple(np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3))


class ArrivalStream:
    """Lazily generated, time-ordered task stream of one type.

    Draws are taken in chunks, but every chunk continues the same
    per-purpose generator, so the i-th task never depends on chunking.
    """

    def __init__(self, spec: TaskTypeSpec, seed: int, chunk: int = 4096):
        self.spec = spec
        self.chunk = chunk
        self._arr_rng, self._cyc_rng, self._dl_rng = type_streams(seed, spec.id)
        self._emitted = 0
        self._last_time = 0.0
        self._buf_t = np.empty(0)
        self._buf_c = np.empty(0)
        self._buf_d = np.empty(0)
        self._buf_seq = np.empty(0, dtype=np.int64)
        self._pos = 0
        if spec.rate > 0 and spec.arrival is Arrival.DETERMINISTIC:
            period = 1.0 / spec.per_md_rate
            if spec.phase == "staggered":
                u = self._arr_rng.uniform()
                phases = (np.arange(spec.md_count) + u) * (period / spec.md_count)
            else:
                phases = self._arr_rng.uniform(0.0, period, spec.md_count)
            self._phases = np.sort(phases)
            self._period = period

    @property
    def active(self) -> bool:
        return self.spec.rate > 0

    def _times(self, n: int) -> np.ndarray:
        s = self.spec
        if s.arrival is Arrival.DETERMINISTIC:
            idx = np.arange(self._emitted, self._emitted + n)
            m = s.md_count
            return self._phases[idx % m] + (idx // m) * self._period
        gaps = self._arr_rng.exponential(1.0 / s.rate, n)
        # accumulate from the previous time so chunk size never changes rounding
        t = np.cumsum(np.concatenate(([self._last_time], gaps)))[1:]
        self._last_time = float(t[-1])
        return t

    def next_chunk(self, n: Optional[int] = None):
        """Arrays (times, cycles, deadlines, seq) for the next ``n`` tasks."""
        n = self.chunk if n is None else n
        if not self.active or n <= 0:
            e = np.empty(0)
            return e, e, e, np.empty(0, dtype=np.int64)
        s = self.spec
        times = self._times(n)
        cycles = sample_required_cycles(s.mean_cycles, s.ci_variation, self._cyc_rng, n)
        lo, hi = s.deadline_range
        deadlines = sample_deadline(lo, hi, self._dl_rng, n)
        seq = np.arange(self._emitted, self._emitted + n, dtype=np.int64)
        self._emitted += n
        return times, cycles, deadlines, seq

    def _take(self, cut):
        parts = []
        while self.active:
            if self._pos >= len(self._buf_t):
                self._buf_t, self._buf_c, self._buf_d, self._buf_seq = self.next_chunk()
                self._pos = 0
            bt = self._buf_t
            end = cut(bt)
            if end > self._pos:
                sl = slice(self._pos, end)
                parts.append((bt[sl], self._buf_c[sl], self._buf_d[sl], self._buf_seq[sl]))
                self._pos = end
            if end < len(bt):
                break
        if not parts:
            e = np.empty(0)
            return e, e, e, np.empty(0, dtype=np.int64)
        return tuple(np.concatenate(x) for x in zip(*parts))

    def until(self, t_stop: float):
        """All not-yet-consumed tasks with arrival time < ``t_stop``."""
        return self._take(lambda bt: int(np.searchsorted(bt, t_stop, side="left")))

    def through_slot(self, slot_index: int, slot: float):
        """All not-yet-consumed tasks whose slot index is <= ``slot_index``."""
        return self._take(lambda bt: int(np.searchsorted(slot_of(bt, slot), slot_index, side="right")))

    def slot_arrivals(self, slot_index: int, slot: float) -> list[ArrivalEvent]:
        """Arrivals falling in slot ``slot_index``; call with nondecreasing slots."""
        times, cyc, dls, seqs = self.through_slot(slot_index, slot)
        return [
            ArrivalEvent(float(t), Task(self.spec.id, float(c), float(d), float(t), seq=int(q)))
            for t, c, d, q in zip(times, cyc, dls, seqs)
        ]


def gen_slot_arrivals(stream: ArrivalStream, slot_index: int, slot: float) -> list[ArrivalEvent]:
    return stream.slot_arrivals(slot_index, slot)


@dataclass
class Workload:
    """All arrivals of a run, sorted by (time, type_id, seq)."""

    time: np.ndarray
    type_id: np.ndarray
    seq: np.ndarray
    required: np.ndarray
    deadline: np.ndarray
    slot_index: np.ndarray
    rates: tuple[float, ...] = field(default=())
    mean_cycles: tuple[float, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.time)

    def tasks(self) -> Iterator[Task]:
        for i in range(len(self)):
            yield Task(
                int(self.type_id[i]), float(self.required[i]), float(self.deadline[i]),
                float(self.time[i]), seq=int(self.seq[i]),
            )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "type_id", "required_cycles", "deadline_s"])
            for i in range(len(self)):
                w.writerow([repr(float(self.time[i])), int(self.type_id[i]),
                            repr(float(self.required[i])), repr(float(self.deadline[i]))])


def generate_workload(scenario: ScenarioSpec, n_tasks: int, slot: float, seed: int) -> Workload:
    """First ``n_tasks`` arrivals of the merged per-type streams.

    ``scenario`` must already be explicit (see ``ScenarioSpec.resolve``).
    """
    if scenario.derivation is not Derivation.EXPLICIT:
        raise ContractError("resolve the scenario before generating its workload")
    streams = [ArrivalStream(t, seed) for t in scenario.types]
    total_rate = sum(t.rate for t in scenario.types)
    kw = dict(rates=tuple(t.rate for t in scenario.types),
              mean_cycles=tuple(t.mean_cycles for t in scenario.types))
    if total_rate == 0 or n_tasks == 0:
        e = np.empty(0)
        ei = np.empty(0, dtype=np.int64)
        return Workload(e, ei, ei, e, e, ei, **kw)

    horizon = 1.1 * n_tasks / total_rate + 1.0
    cols = [[] for _ in range(5)]
    t_done = 0.0
    while True:
        for s in streams:
            t, c, d, q = s.until(horizon)
            for col, arr in zip(cols, (t, np.full(len(t), s.spec.id, dtype=np.int64), q, c, d)):
                col.append(arr)
        t_done = horizon
        count = sum(len(a) for a in cols[0])
        if count >= n_tasks:
            break
        horizon *= 2.0
    time, type_id, seq, required, deadline = (np.concatenate(c) for c in cols)
    order = np.lexsort((seq, type_id, time))[:n_tasks]
    time = time[order]
    assert len(time) == n_tasks and (len(time) == 0 or time[-1] < t_done)
    return Workload(
        time=time, type_id=type_id[order], seq=seq[order],
        required=required[order], deadline=deadline[order],
        slot_index=slot_of(time, slot), **kw,
    )
