import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgesim.core import (
    AllocationPlan,
    ContractError,
    EngineConfig,
    QueueState,
    Task,
    TaskTypeSpec,
    estimate_arrival_load,
    estimate_backlog,
    estimate_sojourn,
    lyapunov,
    running_avg_rate,
    update_backlog,
)

cycles = st.floats(min_value=0, max_value=1e12, allow_nan=False)


class TestUpdateBacklog:
    def test_clamps_at_zero(self):
        assert update_backlog(5e6, 3e6, 1e7) == 0.0

    def test_zero_service_accumulates(self):
        assert update_backlog(1e7, 2e7, 0) == 3e7

    def test_one_slot_at_full_rate(self):
        # 2.1e7 + 2.1e7 - 3e10 * 1e-3
        assert update_backlog(2.1e7, 2.1e7, 3e7) == pytest.approx(1.2e7, rel=1e-12)

    @pytest.mark.parametrize("args", [(-1, 0, 0), (0, -1, 0), (0, 0, -1), (math.nan, 0, 0)])
    def test_rejects_negative(self, args):
        with pytest.raises(ContractError):
            update_backlog(*args)

    @given(cycles, cycles, cycles, cycles)
    def test_monotone(self, q, a, s, extra):
        base = update_backlog(q, a, s)
        assert base >= 0
        assert update_backlog(q + extra, a, s) >= base
        assert update_backlog(q, a + extra, s) >= base
        assert update_backlog(q, a, s + extra) <= base


def test_arrival_load_examples():
    assert estimate_arrival_load(350, 6e7, 1e-3) == pytest.approx(2.1e7, rel=1e-12)
    assert estimate_arrival_load(0, 6e7, 1e-3) == 0
    assert estimate_arrival_load(100, 2.4e8, 1e-3) == pytest.approx(2.4e7, rel=1e-12)


def test_sojourn_examples():
    assert estimate_sojourn(2e7, 1e9) == pytest.approx(0.02)
    assert estimate_sojourn(0, 1e9) == 0
    assert estimate_sojourn(5e6, 0) == 0


class TestEstimateBacklog:
    def test_examples(self):
        assert estimate_backlog(3, 6e7, 1e7) == pytest.approx(2.3e8, rel=1e-12)
        assert estimate_backlog(0, 6e7, 0) == 0
        assert estimate_backlog(1, 6e7, 6e7) == pytest.approx(6e7, rel=1e-12)

    @given(st.integers(1, 10_000), st.floats(1, 1e10))
    def test_fresh_head_adds_one_mean(self, n, mean):
        assert estimate_backlog(n, mean, 0.0) == pytest.approx(n * mean + mean, rel=1e-12)

    def test_clamped(self):
        assert estimate_backlog(1, 1e6, 5e6) == 0.0


def test_running_avg_rate():
    assert running_avg_rate(3e7, 30, 1e-3) == pytest.approx(1e9)
    assert running_avg_rate(0, 100, 1e-3) == 0
    assert running_avg_rate(5e7, 0, 1e-3) == 0


def test_lyapunov_half_square_distance():
    assert lyapunov([3.0, 1.0], [1.0, 1.0]) == 2.0


class TestTypes:
    def spec(self, **kw):
        base = dict(id=0, data_size=6e5, mean_ci=100.0, ci_variation=0.1, deadline_range=(0.003, 0.039))
        base.update(kw)
        return TaskTypeSpec(**base)

    def test_derived_quantities(self):
        s = self.spec(md_count=14)
        assert s.mean_cycles == 6e7
        assert s.rate == 350
        assert s.mean_deadline == pytest.approx(0.021)
        assert s.max_deadline == 0.039

    @pytest.mark.parametrize("kw", [
        dict(deadline_range=(0.02, 0.01)),
        dict(deadline_range=(0.0, 0.01)),
        dict(ci_variation=1.0),
        dict(ci_variation=-0.1),
        dict(md_count=0),
        dict(per_md_rate=-1.0),
        dict(data_size=math.inf),
        dict(phase="synchronized"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            self.spec(**kw)

    def test_engine_config(self):
        with pytest.raises(ContractError):
            EngineConfig(f_max=0)
        with pytest.raises(ContractError):
            EngineConfig(slot=-1e-3)
        with pytest.raises(ContractError):
            EngineConfig(horizon_tasks=0)
        assert EngineConfig(causality="noncausal").causality.value == "noncausal"

    def test_plan_rejects_negative(self):
        with pytest.raises(ContractError):
            AllocationPlan((1.0, -1.0))
        plan = AllocationPlan((1e10, 2e10))
        assert plan.total == 3e10 and plan.within(3e10) and not plan.within(2.9e10)
        assert plan.as_dict() == {0: 1e10, 1: 2e10}

    def test_queue_state_audit(self):
        q = QueueState(0, [Task(0, 5e7, 0.01, 0.0, executed_cycles=2e7), Task(0, 6e7, 0.02, 0.001)])
        assert q.task_count == 2
        assert q.exact_backlog == 9e7
        assert q.head_executed == 2e7
        assert QueueState(1).head_executed == 0
