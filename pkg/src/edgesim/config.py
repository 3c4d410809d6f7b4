"""Scenario files: TOML (or JSON) with a versioned schema, plus built-in presets.

A file looks like::

    schema = 1
    name = "scenA"
    load_fraction = 0.9
    load_ratio = [7.0, 2.0]
    derivation = "from_load_ratio"

    [engine]
    f_max = 30000000000.0
    slot = 0.001
    ...

    [policy]
    V = 2.0

    [[types]]
    id = 0
    data_size = 600000.0
    ...

An optional ``[sweep]`` table lists the grid axes used by ``edgesim sweep``.
"""
from __future__ import annotations

import json
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import ContractError, EngineConfig, TaskTypeSpec
from .policies import POLICY_NAMES
from .workload import Derivation, ScenarioSpec

SCHEMA_VERSION = 1
DEFAULT_RATIOS = ((7.0, 2.0), (5.0, 4.0), (1.0, 2.0), (1.0, 8.0))
DEFAULT_CI_VARIATIONS = (0.0, 0.1, 0.3)


class ConfigError(Exception):
    """Malformed scenario file; carries the offending field and line."""

    def __init__(self, message: str, field: str = "", line: Optional[int] = None, path: str = ""):
        self.field = field
        self.line = line
        self.path = path
        where = path or "<config>"
        if line is not None:
            where += f":{line}"
        if field:
            where += f": field '{field}'"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class SweepSpec:
    policies: tuple[str, ...] = POLICY_NAMES
    load_ratios: tuple[tuple[float, ...], ...] = DEFAULT_RATIOS
    ci_variations: tuple[float, ...] = DEFAULT_CI_VARIATIONS
    load_fractions: tuple[float, ...] = (0.9,)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    out: str = ""
    trace: bool = False

    def __post_init__(self):
        for name in ("policies", "load_ratios", "ci_variations", "load_fractions", "seeds"):
            if not getattr(self, name):
                raise ConfigError("sweep axis must not be empty", field=f"sweep.{name}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("sweep seeds must be distinct", field="sweep.seeds")

    @property
    def n_cells(self) -> int:
        return (len(self.policies) * len(self.load_ratios) * len(self.ci_variations)
                * len(self.load_fractions))


@dataclass(frozen=True)
class Config:
    scenario: ScenarioSpec
    engine: EngineConfig = field(default_factory=EngineConfig)
    V: float = 2.0
    a_max: Optional[tuple[float, ...]] = None
    sweep: Optional[SweepSpec] = None


# -- presets -----------------------------------------------------------------

def _two_types(size2: float, ci2: float, dl2, arrival1: str = "deterministic", v: float = 0.1):
    return (
        TaskTypeSpec(0, 6e5, 100.0, v, (0.003, 0.039), arrival=arrival1, per_md_rate=25.0),
        TaskTypeSpec(1, size2, ci2, v, dl2, per_md_rate=25.0),
    )


def preset(name: str) -> Config:
    """Built-in scenarios: scenA (task sizes), scenB (intensities), scenC (Poisson type 0)."""
    if name == "scenA":
        types = _two_types(2.4e6, 100.0, (0.012, 0.035))
    elif name == "scenB":
        types = _two_types(6e5, 400.0, (0.012, 0.039))
    elif name == "scenC":
        types = _two_types(2.4e6, 100.0, (0.012, 0.035), arrival1="poisson")
    else:
        raise ContractError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    scen = ScenarioSpec(types, load_fraction=0.9, load_ratio=DEFAULT_RATIOS[0], name=name)
    return Config(scen, EngineConfig(), V=2.0, sweep=SweepSpec())


PRESETS = ("scenA", "scenB", "scenC")


# -- dict <-> objects --------------------------------------------------------

def to_dict(cfg: Config) -> dict:
    s = cfg.scenario
    d: dict[str, Any] = {
        "schema": SCHEMA_VERSION,
        "name": s.name,
        "load_fraction": float(s.load_fraction),
        "load_ratio": [float(r) for r in s.load_ratio],
        "derivation": s.derivation.value,
        "engine": {
            "f_max": float(cfg.engine.f_max),
            "slot": float(cfg.engine.slot),
            "horizon_tasks": int(cfg.engine.horizon_tasks),
            "seed": int(cfg.engine.seed),
            "causality": cfg.engine.causality.value,
        },
        "policy": {"V": float(cfg.V)},
        "types": [
            {
                "id": t.id,
                "data_size": float(t.data_size),
                "mean_ci": float(t.mean_ci),
                "ci_variation": float(t.ci_variation),
                "deadline_range": [float(x) for x in t.deadline_range],
                "arrival": t.arrival.value,
                "md_count": int(t.md_count),
                "per_md_rate": float(t.per_md_rate),
                "phase": t.phase,
            }
            for t in s.types
        ],
    }
    if cfg.a_max is not None:
        d["policy"]["a_max"] = [float(a) for a in cfg.a_max]
    if cfg.sweep is not None:
        sw = cfg.sweep
        d["sweep"] = {
            "policies": list(sw.policies),
            "load_ratios": [[float(x) for x in r] for r in sw.load_ratios],
            "ci_variations": [float(v) for v in sw.ci_variations],
            "load_fractions": [float(v) for v in sw.load_fractions],
            "seeds": [int(x) for x in sw.seeds],
            "trace": bool(sw.trace),
        }
        if sw.out:
            d["sweep"]["out"] = sw.out
    return d


def dumps(cfg: Config) -> str:
    return tomli_w.dumps(to_dict(cfg))


def _locate(text: str, dotted: str) -> Optional[int]:
    """Best-effort line number of a dotted field such as ``types.1.mean_ci``."""
    if not text:
        return None
    parts = dotted.split(".")
    key = parts[-1]
    table, index = "", None
    if len(parts) >= 2:
        table = parts[0]
        if len(parts) >= 3 and parts[1].isdigit():
            index = int(parts[1])
    current, count = "", -1
    fallback = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\[\s*([\w.]+)\s*\]\]", line) or re.match(r"^\[\s*([\w.]+)\s*\]", line)
        if m:
            current = m.group(1)
            if line.startswith("[[") and current == table:
                count += 1
            if current == table and key == table:
                return lineno
            continue
        if re.match(rf'^"?{re.escape(key)}"?\s*[=:]', line):
            if current == table and (index is None or count == index):
                return lineno
            if fallback is None and not table:
                fallback = lineno
    return fallback


class _Reader:
    """Typed field access that reports the dotted path and source line on failure."""

    def __init__(self, text: str, path: str):
        self.text = text
        self.path = path

    def fail(self, message: str, where: str):
        raise ConfigError(message, field=where, line=_locate(self.text, where), path=self.path)

    def get(self, d: dict, key: str, where: str, kind, default=...):
        if key not in d:
            if default is ...:
                self.fail("missing required field", where)
            return default
        value = d[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, kind) or (kind in (int, float) and isinstance(value, bool)):
            self.fail(f"expected {kind.__name__}, got {type(value).__name__}", where)
        return value

    def floats(self, d: dict, key: str, where: str, default=...):
        value = self.get(d, key, where, list, default)
        if value is default:
            return value
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(f"element {i} must be a number", where)
            out.append(float(v))
        return tuple(out)

    def unknown(self, d: dict, allowed: set, prefix: str):
        for key in d:
            if key not in allowed:
                self.fail("unknown field", f"{prefix}{key}")


_TOP = {"schema", "name", "load_fraction", "load_ratio", "derivation", "engine", "policy", "types", "sweep"}
_ENGINE = {"f_max", "slot", "horizon_tasks", "seed", "causality"}
_TYPE = {"id", "data_size", "mean_ci", "ci_variation", "deadline_range", "arrival", "md_count",
         "per_md_rate", "phase"}
_SWEEP = {"policies", "load_ratios", "ci_variations", "load_fractions", "seeds", "out", "trace"}


def from_dict(d: dict, text: str = "", path: str = "") -> Config:
    """Build a Config; schema problems raise ConfigError, bad values ContractError."""
    r = _Reader(text, path)
    r.unknown(d, _TOP, "")
    schema = r.get(d, "schema", "schema", int)
    if schema != SCHEMA_VERSION:
        r.fail(f"unsupported schema version {schema} (expected {SCHEMA_VERSION})", "schema")

    eng = r.get(d, "engine", "engine", dict, {})
    r.unknown(eng, _ENGINE, "engine.")
    default = EngineConfig()
    causality = r.get(eng, "causality", "engine.causality", str, default.causality.value)
    if causality not in ("causal", "noncausal"):
        r.fail("must be 'causal' or 'noncausal'", "engine.causality")
    engine = EngineConfig(
        f_max=r.get(eng, "f_max", "engine.f_max", float, default.f_max),
        slot=r.get(eng, "slot", "engine.slot", float, default.slot),
        horizon_tasks=r.get(eng, "horizon_tasks", "engine.horizon_tasks", int, default.horizon_tasks),
        seed=r.get(eng, "seed", "engine.seed", int, default.seed),
        causality=causality,
    )

    pol = r.get(d, "policy", "policy", dict, {})
    r.unknown(pol, {"V", "a_max"}, "policy.")
    V = r.get(pol, "V", "policy.V", float, 2.0)
    a_max = r.floats(pol, "a_max", "policy.a_max", None)

    raw_types = r.get(d, "types", "types", list)
    types = []
    for i, t in enumerate(raw_types):
        p = f"types.{i}."
        if not isinstance(t, dict):
            r.fail("each type must be a table", f"types.{i}")
        r.unknown(t, _TYPE, p)
        arrival = r.get(t, "arrival", p + "arrival", str, "deterministic")
        if arrival not in ("deterministic", "poisson"):
            r.fail("must be 'deterministic' or 'poisson'", p + "arrival")
        dl = r.floats(t, "deadline_range", p + "deadline_range")
        if len(dl) != 2:
            r.fail("needs exactly two values [lo, hi]", p + "deadline_range")
        types.append(TaskTypeSpec(
            id=r.get(t, "id", p + "id", int, i),
            data_size=r.get(t, "data_size", p + "data_size", float),
            mean_ci=r.get(t, "mean_ci", p + "mean_ci", float),
            ci_variation=r.get(t, "ci_variation", p + "ci_variation", float, 0.0),
            deadline_range=dl,
            arrival=arrival,
            md_count=r.get(t, "md_count", p + "md_count", int, 1),
            per_md_rate=r.get(t, "per_md_rate", p + "per_md_rate", float, 25.0),
            phase=r.get(t, "phase", p + "phase", str, "random"),
        ))

    derivation = r.get(d, "derivation", "derivation", str, Derivation.FROM_LOAD_RATIO.value)
    if derivation not in ("explicit", "from_load_ratio"):
        r.fail("must be 'explicit' or 'from_load_ratio'", "derivation")
    scenario = ScenarioSpec(
        types=tuple(types),
        load_fraction=r.get(d, "load_fraction", "load_fraction", float, 0.9),
        load_ratio=r.floats(d, "load_ratio", "load_ratio", ()),
        derivation=derivation,
        name=r.get(d, "name", "name", str, Path(path).stem if path else "custom"),
    )

    sweep = None
    if "sweep" in d:
        sw = r.get(d, "sweep", "sweep", dict)
        r.unknown(sw, _SWEEP, "sweep.")
        base = SweepSpec()
        policies = tuple(r.get(sw, "policies", "sweep.policies", list, list(base.policies)))
        for name in policies:
            if name not in POLICY_NAMES:
                raise ContractError(f"unknown policy {name!r}; valid: {', '.join(POLICY_NAMES)}")
        ratios = r.get(sw, "load_ratios", "sweep.load_ratios", list, [list(x) for x in base.load_ratios])
        seeds = r.get(sw, "seeds", "sweep.seeds", list, list(base.seeds))
        for s in seeds:
            if isinstance(s, bool) or not isinstance(s, int):
                r.fail("seeds must be integers", "sweep.seeds")
        for ratio in ratios:
            if not isinstance(ratio, list):
                r.fail("each load ratio must be a list of weights", "sweep.load_ratios")
        sweep = SweepSpec(
            policies=policies,
            load_ratios=tuple(tuple(float(x) for x in ratio) for ratio in ratios),
            ci_variations=r.floats(sw, "ci_variations", "sweep.ci_variations", base.ci_variations),
            load_fractions=r.floats(sw, "load_fractions", "sweep.load_fractions", base.load_fractions),
            seeds=tuple(seeds),
            out=r.get(sw, "out", "sweep.out", str, ""),
            trace=r.get(sw, "trace", "sweep.trace", bool, False),
        )
    return Config(scenario, engine, V=V, a_max=a_max, sweep=sweep)


# -- text parsing and overrides --------------------------------------------

def parse_value(text: str) -> Any:
    """Interpret an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(d: dict, assignment: str) -> None:
    """Apply ``dotted.key=value`` to a raw config dict in place."""
    if "=" not in assignment:
        raise ConfigError("override must look like key=value", field=assignment)
    key, _, value = assignment.partition("=")
    parts = key.strip().split(".")
    node: Any = d
    for i, part in enumerate(parts[:-1]):
        where = ".".join(parts[: i + 1])
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError("no such list element", field=where)
            node = node[int(part)]
        elif isinstance(node, dict):
            node = node.setdefault(part, {})
        else:
            raise ConfigError("cannot descend into a scalar", field=where)
    last = parts[-1]
    if isinstance(node, list):
        if not last.isdigit() or int(last) >= len(node):
            raise ConfigError("no such list element", field=key.strip())
        node[int(last)] = parse_value(value.strip())
    else:
        node[last] = parse_value(value.strip())


def _decode(text: str, path: str) -> dict:
    is_json = path.endswith(".json") or text.lstrip().startswith("{")
    try:
        if is_json:
            return json.loads(text)
        return tomllib.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno, path=path) from None
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(str(e), line=int(m.group(1)) if m else None, path=path) from None


def loads(text: str, path: str = "", overrides=()) -> Config:
    d = _decode(text, path)
    if not isinstance(d, dict):
        raise ConfigError("top level must be a table", path=path)
    for o in overrides:
        apply_override(d, o)
    return from_dict(d, text, path)


def load(path, overrides=()) -> Config:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read file: {e.strerror}", path=str(p)) from None
    return loads(text, str(p), overrides)


def validate(cfg: Config) -> ScenarioSpec:
    """Semantic checks beyond the schema; returns the resolved scenario."""
    scen = cfg.scenario.resolve(cfg.engine.f_max)
    if not scen.total_load > 0:
        raise ContractError("scenario has zero offered load")
    if cfg.a_max is not None and len(cfg.a_max) != len(scen.types):
        raise ContractError("policy.a_max needs one value per task type")
    if cfg.V < 0:
        raise ContractError("policy.V must be >= 0")
    return scen


def cell_config(cfg: Config, policy: str, ratio, ci_variation: float, load_fraction: float, seed: int):
    """The single-run configuration for one sweep cell."""
    scen = cfg.scenario.with_ci_variation(ci_variation).with_ratio(ratio, load_fraction)
    return replace(cfg, scenario=scen, engine=replace(cfg.engine, seed=seed), sweep=None)
