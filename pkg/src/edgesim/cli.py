"""Command-line front end: ``edgesim run|sweep|presets|validate``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .core import ContractError
from .engine import RunResult, Simulator
from .metrics import summarize

log = logging.getLogger("edgesim")

EXIT_OK, EXIT_FAILED, EXIT_PARSE, EXIT_INVALID = 0, 1, 2, 3

REPORT_COLUMNS = [
    "policy", "scenario", "ratio", "load", "ci_variation", "seed", "type_id",
    "timeout_prob", "waste_fraction", "tasks", "dropped", "mean_sojourn_s", "drift_violation_rate",
]
SWEEP_COLUMNS = REPORT_COLUMNS + ["timeout_prob_std", "waste_fraction_std", "error"]

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
           "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("EDGESIM_LOG", "warn").lower()
    logging.basicConfig(level=_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _num(x: float) -> str:
    """Shortest round-trip text of a number; integral values drop the '.0'."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _ratio_text(ratio) -> str:
    return "/".join(_num(r) for r in ratio)


def _load_config(spec: str, overrides) -> cfgmod.Config:
    """``spec`` is a file path, or a preset name when no such file exists."""
    if not Path(spec).exists() and spec in cfgmod.PRESETS:
        d = cfgmod.to_dict(cfgmod.preset(spec))
        for o in overrides:
            cfgmod.apply_override(d, o)
        return cfgmod.from_dict(d, path=spec)
    return cfgmod.load(spec, overrides)


def report_rows(result: RunResult, cfg: cfgmod.Config, seed) -> list[dict]:
    """The weighted row followed by one row per task type."""
    scen = cfg.scenario
    m = result.metrics
    rec = result.records
    base = {
        "policy": result.policy.name,
        "scenario": scen.name,
        "ratio": _ratio_text(scen.load_ratio) if scen.load_ratio else "",
        "load": _num(scen.load_fraction),
        "ci_variation": _num(scen.types[0].ci_variation),
        "seed": str(seed),
        "drift_violation_rate": repr(float(m.drift_violation_rate)),
    }
    done = rec.outcome == 1
    sojourn = rec.sojourn()
    to = rec.timed_out() if len(rec) else np.zeros(0, dtype=bool)
    cap = result.config.f_max * m.t_sim

    def row(type_id, timeout, mask):
        waste = float(rec.executed[mask & to].sum()) / cap if cap > 0 else 0.0
        c = mask & done
        return dict(base, type_id=type_id, timeout_prob=repr(float(timeout)),
                    waste_fraction=repr(waste), tasks=str(int(mask.sum())),
                    dropped=str(int((mask & (rec.outcome == 2)).sum())),
                    mean_sojourn_s=repr(float(sojourn[c].mean())) if c.any() else "nan")

    rows = [row("weighted", m.weighted_timeout, np.ones(len(rec), dtype=bool))]
    for k, p in sorted(m.per_type_timeout.items()):
        rows.append(row(str(k), p, rec.type_id == k))
    return rows


def write_csv(path: Optional[str], columns, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(rows)
    if path in (None, "", "-"):
        sys.stdout.write(buf.getvalue())
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(buf.getvalue())


def simulate(cfg: cfgmod.Config, policy: str, trace: bool = False) -> RunResult:
    cfgmod.validate(cfg)
    sim = Simulator(cfg.scenario, cfg.engine, policy, V=cfg.V, a_max=cfg.a_max)
    return sim.run(trace=trace)


# -- commands ----------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _load_config(args.config, args.override)
    if args.seed is not None:
        cfg = replace(cfg, engine=replace(cfg.engine, seed=args.seed))
    result = simulate(cfg, args.policy, trace=bool(args.trace))
    if result.capacity_violations:
        log.error("capacity exceeded in %d slots", result.capacity_violations)
    if args.trace:
        result.write_trace(args.trace)
    write_csv(args.out, REPORT_COLUMNS, report_rows(result, cfg, cfg.engine.seed))
    m = result.metrics
    log.info("%s: weighted timeout %.4f, waste %.4f, %d slots",
             args.policy, m.weighted_timeout, m.waste_fraction, result.n_slots)
    return EXIT_OK


def _sweep_job(job):
    cfg, policy, seed, trace_path = job
    try:
        result = simulate(cfg, policy, trace=bool(trace_path))
        if trace_path:
            result.write_trace(trace_path)
        return report_rows(result, cfg, seed)[0], None
    except Exception as e:  # recorded per row, the sweep carries on
        return None, f"{type(e).__name__}: {e}"


def _cells(cfg: cfgmod.Config, sweep: cfgmod.SweepSpec):
    for policy in sweep.policies:
        for ratio in sweep.load_ratios:
            for v in sweep.ci_variations:
                for rho in sweep.load_fractions:
                    yield policy, ratio, v, rho


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.override)
    sweep = cfg.sweep or cfgmod.SweepSpec()
    if args.seeds is not None:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        sweep = replace(sweep, seeds=seeds)  # re-validated by __post_init__
    out = args.out or sweep.out or None
    trace_dir = args.trace or (str(Path(out or ".").with_suffix("")) + "_traces" if sweep.trace else "")
    if trace_dir:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)

    cells = list(_cells(cfg, sweep))
    jobs, meta = [], []
    for policy, ratio, v, rho in cells:
        for seed in sweep.seeds:
            c = cfgmod.cell_config(cfg, policy, ratio, v, rho, seed)
            tp = ""
            if trace_dir:
                tp = str(Path(trace_dir) / f"{policy}_{_ratio_text(ratio).replace('/', '-')}_v{_num(v)}_rho{_num(rho)}_s{seed}.csv")
            jobs.append((c, policy, seed, tp))
            meta.append((policy, ratio, v, rho, seed))
    log.info("sweep: %d cells x %d seeds", len(cells), len(sweep.seeds))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    rows, failed = [], 0
    n_seeds = len(sweep.seeds)
    for ci in range(len(cells)):
        policy, ratio, v, rho = cells[ci]
        cell_rows = []
        for j in range(ci * n_seeds, (ci + 1) * n_seeds):
            row, err = results[j]
            if err is not None:
                failed += 1
                seed = meta[j][4]
                row = {"policy": policy, "scenario": cfg.scenario.name, "ratio": _ratio_text(ratio),
                       "load": _num(rho), "ci_variation": _num(v), "seed": str(seed),
                       "type_id": "weighted", "error": err}
            else:
                cell_rows.append(row)
            rows.append(row)
        rows.append(_summary_row(policy, cfg.scenario.name, ratio, v, rho, cell_rows))
    write_csv(out, SWEEP_COLUMNS, rows)
    if failed:
        log.error("%d of %d runs failed", failed, len(jobs))
        return EXIT_FAILED
    return EXIT_OK


def _summary_row(policy, scenario, ratio, v, rho, cell_rows) -> dict:
    def stat(col):
        return summarize(float(r[col]) for r in cell_rows if r.get(col) not in (None, "", "nan"))

    to, waste = stat("timeout_prob"), stat("waste_fraction")
    soj, drift = stat("mean_sojourn_s"), stat("drift_violation_rate")
    row = {"policy": policy, "scenario": scenario, "ratio": _ratio_text(ratio), "load": _num(rho),
           "ci_variation": _num(v), "seed": "mean", "type_id": "weighted"}
    if to.n == 0:
        row["error"] = "no successful runs"
        return row
    row.update(
        timeout_prob=repr(to.mean), waste_fraction=repr(waste.mean),
        tasks=str(sum(int(r["tasks"]) for r in cell_rows)),
        dropped=str(sum(int(r["dropped"]) for r in cell_rows)),
        mean_sojourn_s=repr(soj.mean) if soj.n else "nan",
        drift_violation_rate=repr(drift.mean),
        timeout_prob_std=repr(to.std), waste_fraction_std=repr(waste.std),
    )
    return row


def cmd_presets(args) -> int:
    if args.name is None:
        print("\n".join(cfgmod.PRESETS))
        return EXIT_OK
    text = cfgmod.dumps(cfgmod.preset(args.name))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load_config(args.config, args.override)
    scen = cfgmod.validate(cfg)
    load = scen.total_load / cfg.engine.f_max
    rates = ", ".join(f"type {t.id}: {_num(t.rate)}/s ({t.md_count} MD)" for t in scen.types)
    print(f"ok: {scen.name}, offered load {load:.4f}; {rates}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="scenario file (TOML or JSON) or preset name")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a dotted config field, e.g. engine.horizon_tasks=20000")

    p = sub.add_parser("run", help="simulate one policy on one scenario")
    common(p)
    p.add_argument("--policy", default="dynamic")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="report CSV (stdout if omitted)")
    p.add_argument("--trace", default=None, metavar="PATH", help="write the event trace CSV here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the policy x ratio x CI-variation x load x seed grid")
    common(p)
    p.add_argument("--seeds", default=None, help="comma-separated seeds, replaces sweep.seeds")
    p.add_argument("--out", default=None)
    p.add_argument("--trace", default=None, metavar="DIR", help="write one trace CSV per run here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("presets", help="print or write a built-in scenario file")
    p.add_argument("name", nargs="?")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_presets)

    p = sub.add_parser("validate", help="schema and value check only")
    common(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_PARSE
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
