import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgesim import config as cfgmod
from edgesim.cli import REPORT_COLUMNS, SWEEP_COLUMNS, main
from edgesim.core import ContractError

SMALL = ["--override", "engine.horizon_tasks=300"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def scen_file(tmp_path):
    path = tmp_path / "scenA.toml"
    assert main(["presets", "scenA", "--out", str(path)]) == 0
    return path


class TestConfig:
    @pytest.mark.parametrize("name", cfgmod.PRESETS)
    def test_presets_mean_cycles(self, name):
        cfg = cfgmod.loads(cfgmod.dumps(cfgmod.preset(name)))
        assert tuple(t.mean_cycles for t in cfg.scenario.types) == (6e7, 2.4e8)
        assert cfg.engine.f_max == 3e10 and cfg.engine.slot == 1e-3 and cfg.V == 2.0
        assert cfg.scenario.load_fraction == 0.9
        assert all(t.per_md_rate == 25 for t in cfg.scenario.types)

    def test_scenario_differences(self):
        a, b, c = (cfgmod.preset(n).scenario for n in cfgmod.PRESETS)
        assert a.types[1].deadline_range == (0.012, 0.035)
        assert b.types[1].mean_ci == 400 and b.types[1].deadline_range == (0.012, 0.039)
        assert c.types[0].arrival.value == "poisson" and c.types[1].arrival.value == "deterministic"

    @pytest.mark.parametrize("name", cfgmod.PRESETS)
    def test_round_trip(self, name):
        text = cfgmod.dumps(cfgmod.preset(name))
        cfg = cfgmod.loads(text)
        assert cfg == cfgmod.preset(name)
        assert cfgmod.dumps(cfg) == text

    @settings(max_examples=40)
    @given(
        st.floats(0.05, 1.5), st.lists(st.floats(0.1, 10), min_size=2, max_size=2),
        st.floats(0, 0.9), st.integers(0, 2**32), st.floats(0, 10),
        st.sampled_from(["causal", "noncausal"]),
    )
    def test_round_trip_fixed_point(self, rho, ratio, v, seed, V, causality):
        d = cfgmod.to_dict(cfgmod.preset("scenB"))
        d.update(load_fraction=rho, load_ratio=ratio)
        d["engine"].update(seed=seed, causality=causality)
        d["policy"]["V"] = V
        for t in d["types"]:
            t["ci_variation"] = v
        first = cfgmod.dumps(cfgmod.from_dict(d))
        assert cfgmod.dumps(cfgmod.loads(first)) == first

    def test_json_accepted(self):
        d = cfgmod.to_dict(cfgmod.preset("scenC"))
        assert cfgmod.loads(json.dumps(d), "x.json") == cfgmod.preset("scenC")

    def test_error_reports_line_and_field(self):
        text = cfgmod.dumps(cfgmod.preset("scenA")).replace("mean_ci = 100.0", 'mean_ci = "lots"', 1)
        with pytest.raises(cfgmod.ConfigError) as e:
            cfgmod.loads(text, "s.toml")
        assert e.value.field == "types.0.mean_ci"
        assert text.splitlines()[e.value.line - 1].startswith("mean_ci")

    def test_syntax_error_line(self):
        with pytest.raises(cfgmod.ConfigError) as e:
            cfgmod.loads("schema = 1\nname = \n")
        assert e.value.line == 2

    @pytest.mark.parametrize("mutate, field", [
        (lambda d: d.pop("schema"), "schema"),
        (lambda d: d.update(schema=2), "schema"),
        (lambda d: d.update(colour="red"), "colour"),
        (lambda d: d["engine"].update(f_max="fast"), "engine.f_max"),
        (lambda d: d["types"][1].update(deadline_range=[0.1]), "types.1.deadline_range"),
        (lambda d: d["sweep"].update(seeds=[]), "sweep.seeds"),
        (lambda d: d["sweep"].update(seeds=[1, 1]), "sweep.seeds"),
    ])
    def test_schema_errors(self, mutate, field):
        d = cfgmod.to_dict(cfgmod.preset("scenA"))
        mutate(d)
        with pytest.raises(cfgmod.ConfigError) as e:
            cfgmod.from_dict(d)
        assert e.value.field == field

    def test_value_errors_are_contract_errors(self):
        d = cfgmod.to_dict(cfgmod.preset("scenA"))
        d["types"][0]["ci_variation"] = 1.5
        with pytest.raises(ContractError):
            cfgmod.from_dict(d)

    def test_overrides(self):
        d = cfgmod.to_dict(cfgmod.preset("scenA"))
        cfgmod.apply_override(d, "engine.seed=99")
        cfgmod.apply_override(d, "types.1.ci_variation=0.3")
        cfgmod.apply_override(d, "load_ratio=[1, 8]")
        cfg = cfgmod.from_dict(d)
        assert cfg.engine.seed == 99
        assert cfg.scenario.types[1].ci_variation == 0.3
        assert cfg.scenario.load_ratio == (1.0, 8.0)
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.apply_override(d, "types.5.mean_ci=1")


class TestCommands:
    def test_run_rows(self, scen_file, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["run", "--config", str(scen_file), "--policy", "dynamic", "--seed", "42",
                     "--out", str(out)] + SMALL) == 0
        r = rows(out)
        assert list(r[0]) == REPORT_COLUMNS
        assert [x["type_id"] for x in r] == ["weighted", "0", "1"]
        assert sum(int(x["tasks"]) for x in r[1:]) == int(r[0]["tasks"]) == 300
        assert r[0]["ratio"] == "7/2" and r[0]["seed"] == "42"
        assert float(r[0]["drift_violation_rate"]) >= 0

    def test_run_deterministic(self, scen_file, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for p in (a, b):
            assert main(["run", "--config", str(scen_file), "--seed", "42", "--out", str(p)] + SMALL) == 0
        assert a.read_bytes() == b.read_bytes()
        assert b"\r" not in a.read_bytes()

    def test_run_trace(self, scen_file, tmp_path):
        trace = tmp_path / "t.csv"
        assert main(["run", "--config", str(scen_file), "--trace", str(trace), "--out",
                     str(tmp_path / "r.csv")] + SMALL) == 0
        header = trace.read_text().splitlines()[0]
        assert header == "time_s,kind,type_id,task_seq,required_cycles,executed_cycles,deadline_s,plan_f_k"

    def test_unknown_policy(self, scen_file, capsys):
        assert main(["run", "--config", str(scen_file), "--policy", "nosuch"] + SMALL) == 3
        assert "dynamic-noncausal" in capsys.readouterr().err

    def test_parse_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("schema = 1\nload_fraction = [\n")
        assert main(["validate", "--config", str(bad)]) == 2
        assert "bad.toml" in capsys.readouterr().err

    def test_zero_load(self, tmp_path):
        d = cfgmod.to_dict(cfgmod.preset("scenA"))
        d["derivation"] = "explicit"
        for t in d["types"]:
            t["per_md_rate"] = 0.0
        path = tmp_path / "zero.json"
        path.write_text(json.dumps(d))
        assert main(["run", "--config", str(path)]) == 3

    def test_presets(self, capsys):
        assert main(["presets"]) == 0
        assert capsys.readouterr().out.split() == list(cfgmod.PRESETS)
        assert main(["presets", "scenB"]) == 0
        assert "schema = 1" in capsys.readouterr().out
        assert main(["presets", "scenZ"]) == 3

    def test_validate(self, scen_file, capsys):
        assert main(["validate", "--config", str(scen_file)]) == 0
        assert "350/s (14 MD)" in capsys.readouterr().out

    def test_log_env(self, scen_file, monkeypatch, capsys):
        monkeypatch.setenv("EDGESIM_LOG", "debug")
        assert main(["run", "--config", str(scen_file), "--out", "-"] + SMALL) == 0


class TestSweep:
    def test_full_grid_counts(self, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["sweep", "--config", "scenA", "--out", str(out),
                     "--override", "engine.horizon_tasks=150"]) == 0
        r = rows(out)
        assert list(r[0]) == SWEEP_COLUMNS
        data = [x for x in r if x["seed"] != "mean"]
        summary = [x for x in r if x["seed"] == "mean"]
        assert len(data) == 6 * 4 * 3 * 5 == 360
        assert len(summary) == 72
        assert all(x["error"] == "" for x in r)
        cells = [(x["policy"], x["ratio"], x["ci_variation"]) for x in summary]
        assert cells[:3] == [("dynamic", "7/2", "0"), ("dynamic", "7/2", "0.1"), ("dynamic", "7/2", "0.3")]

    def test_single_cell_matches_run(self, tmp_path):
        sweep_out, run_out = tmp_path / "s.csv", tmp_path / "r.csv"
        over = ["--override", "engine.horizon_tasks=400", "--override", 'sweep.policies=["sharing"]',
                "--override", "sweep.load_ratios=[[1, 2]]", "--override", "sweep.ci_variations=[0.1]"]
        assert main(["sweep", "--config", "scenB", "--seeds", "3", "--out", str(sweep_out)] + over) == 0
        assert main(["run", "--config", "scenB", "--policy", "sharing", "--seed", "3",
                     "--override", "engine.horizon_tasks=400", "--override", "load_ratio=[1, 2]",
                     "--out", str(run_out)]) == 0
        s, r = rows(sweep_out)[0], rows(run_out)[0]
        assert {k: s[k] for k in REPORT_COLUMNS} == r

    def test_jobs_same_output(self, tmp_path):
        over = ["--override", "engine.horizon_tasks=200", "--override", "sweep.load_ratios=[[5, 4]]",
                "--override", "sweep.ci_variations=[0.0]", "--seeds", "1,2"]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["sweep", "--config", "scenC", "--out", str(a)] + over) == 0
        assert main(["sweep", "--config", "scenC", "--out", str(b), "--jobs", "2"] + over) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_empty_seeds(self):
        assert main(["sweep", "--config", "scenA", "--seeds", ""]) == 2

    def test_partial_failure(self, tmp_path):
        out = tmp_path / "s.csv"
        over = ["--override", "engine.horizon_tasks=100", "--override", 'sweep.policies=["dynamic"]',
                "--override", "sweep.load_ratios=[[1, 2], [1, 0]]", "--override", "sweep.ci_variations=[0.1]",
                "--seeds", "1"]
        assert main(["sweep", "--config", "scenA", "--out", str(out)] + over) == 1
        r = rows(out)
        assert r[0]["error"] == "" and "ContractError" in r[2]["error"]
        assert len(r) == 4
