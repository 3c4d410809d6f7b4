import numpy as np
import pytest

from edgesim.core import EngineConfig, TaskTypeSpec
from edgesim.workload import Derivation, ScenarioSpec, Workload, slot_of

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def explicit_scenario(*types, name="test"):
    return ScenarioSpec(tuple(types), derivation=Derivation.EXPLICIT, name=name)


def hand_workload(rows, slot=1e-3, n_types=2):
    """Workload from (time, type_id, required_cycles, deadline) tuples."""
    rows = sorted(rows, key=lambda r: (r[0], r[1]))
    seq_of = {}
    seqs = []
    for r in rows:
        seqs.append(seq_of.get(r[1], 0))
        seq_of[r[1]] = seqs[-1] + 1
    time = np.array([r[0] for r in rows], dtype=np.float64)
    return Workload(
        time=time,
        type_id=np.array([r[1] for r in rows], dtype=np.int64),
        seq=np.array(seqs, dtype=np.int64),
        required=np.array([r[2] for r in rows], dtype=np.float64),
        deadline=np.array([r[3] for r in rows], dtype=np.float64),
        slot_index=slot_of(time, slot),
        rates=(25.0,) * n_types,
        mean_cycles=(6e7,) * n_types,
    )


@pytest.fixture
def two_types():
    """Small two-type scenario: type 0 is light and tight, type 1 heavy."""
    return explicit_scenario(
        TaskTypeSpec(0, 6e5, 100.0, 0.1, (0.003, 0.039), md_count=6),
        TaskTypeSpec(1, 2.4e6, 100.0, 0.1, (0.012, 0.035), md_count=2),
    )


@pytest.fixture
def small_config():
    return EngineConfig(horizon_tasks=3000, seed=7)
