"""Command-line front end: run, resume, compare, report.

Configuration is a single JSON file; CLI flags override config fields.
Each seed writes an append-only ``events.jsonl`` (one line per
evaluation with model and routing diagnostics) and an atomically
replaced ``checkpoint.bin`` per iteration, so interrupted runs resume
exactly.  Reports are plain CSV, always recomputable from the raw
event logs.  Set ``MFBO_LOG_LEVEL=info`` (or ``debug``) for progress
output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from mfbo.fusion import McConfig
from mfbo.gp import ContractViolation, FitConfig
from mfbo.optimizer import (
    FidelityConfig,
    MspConfig,
    OptimizerConfig,
    RunState,
    initialize,
    step,
)
from mfbo.problems import Bounds, Problem, ProblemSpec, builtin_spec, grid_oracle, make_problem

logger = logging.getLogger("mfbo")

CHECKPOINT_VERSION = 1


class ConfigError(Exception):
    """Invalid configuration; carries the offending field path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"config error at {field_path}: {message}")
        self.field_path = field_path


class CorruptCheckpoint(Exception):
    pass


class OutputExists(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Parsed, validated run configuration."""

    problem: ProblemSpec
    seeds: Tuple[int, ...]
    fidelity: FidelityConfig
    msp: MspConfig
    mc: McConfig
    fit: FitConfig
    n_init_low: int
    n_init_high: int
    init_design: str
    init_box: Optional[Tuple[Tuple[float, float], ...]]
    output_dir: str
    max_failures: int
    timeout_secs: float


_MISSING = object()


class _Section:
    """Dict wrapper that tracks consumed keys and names fields in errors."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected an object")
        self.data = data
        self.path = path
        self.seen = set()

    def _field(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind, default=_MISSING, check=None, describe=""):
        self.seen.add(key)
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(self._field(key), "required field is missing")
            return default
        value = self.data[key]
        if value is None and default is None:
            return None  # explicit null selects the optional default
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)
                                 and kind is not bool):
            raise ConfigError(self._field(key), f"expected {kind.__name__}")
        if check is not None and not check(value):
            raise ConfigError(self._field(key), describe or "invalid value")
        return value

    def section(self, key: str, required=False) -> "_Section":
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ConfigError(self._field(key), "required section is missing")
            return _Section({}, self._field(key))
        return _Section(self.take(key, dict), self._field(key))

    def reject_unknown(self):
        unknown = set(self.data) - self.seen
        if unknown:
            raise ConfigError(self._field(sorted(unknown)[0]), "unknown field")


def _parse_problem(sec: _Section) -> ProblemSpec:
    builtin = sec.take("builtin", str, default=None)
    external = sec.take("external", dict, default=None)
    sec.reject_unknown()
    if (builtin is None) == (external is None):
        raise ConfigError(sec.path, "give exactly one of 'builtin' or 'external'")
    if builtin is not None:
        try:
            return builtin_spec(builtin)
        except ContractViolation as exc:
            raise ConfigError(f"{sec.path}.builtin", str(exc))
    ext = _Section(external, f"{sec.path}.external")
    name = ext.take("name", str, default="external")
    command = ext.take("command", str)
    dimension = ext.take("dimension", int, check=lambda v: v >= 1,
                         describe="must be >= 1")
    n_constraints = ext.take("n_constraints", int, check=lambda v: v >= 0,
                             describe="must be >= 0")
    cost_ratio = ext.take("cost_ratio", float, check=lambda v: v > 0,
                          describe="must be positive")
    raw_bounds = ext.take("bounds", list)
    ext.reject_unknown()
    try:
        bounds = Bounds.from_pairs(raw_bounds)
        if bounds.dim != dimension:
            raise ContractViolation("number of bound pairs must equal dimension")
        return ProblemSpec(name, dimension, bounds, n_constraints,
                           "external", command, cost_ratio)
    except (ContractViolation, ValueError) as exc:
        raise ConfigError(f"{sec.path}.bounds", str(exc))


def parse_config(data: dict) -> RunConfig:
    root = _Section(data, "")
    problem = _parse_problem(root.section("problem", required=True))

    seeds = root.take("seeds", list, default=[0])
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    for s in seeds:
        if not isinstance(s, int) or isinstance(s, bool):
            raise ConfigError("seeds", "seeds must be integers")

    b = root.section("budget", required=True)
    fidelity = FidelityConfig(
        total_budget_equiv=b.take("total_equiv", float, check=lambda v: v >= 0,
                                  describe="must be >= 0"),
        gamma=b.take("gamma", float, default=0.01, check=lambda v: v > 0,
                     describe="must be positive"),
        cost_ratio=b.take("cost_ratio", float, default=None,
                          check=lambda v: v is None or v > 0,
                          describe="must be positive"),
        high_budget=b.take("high_budget", int, default=1_000_000,
                           check=lambda v: v >= 1, describe="must be >= 1"),
    )
    b.reject_unknown()

    m = root.section("msp")
    try:
        msp = MspConfig(
            n_candidates=m.take("n_candidates", int, default=100),
            frac_around_tau_l=m.take("frac_around_tau_l", float, default=0.10),
            frac_around_tau_h=m.take("frac_around_tau_h", float, default=0.40),
            anchor_radius=m.take("anchor_radius", float, default=0.05),
            n_local_starts=m.take("n_local_starts", int, default=10),
            local_iteration_cap=m.take("local_iteration_cap", int, default=50),
        )
    except ContractViolation as exc:
        raise ConfigError("msp", str(exc))
    m.reject_unknown()

    mc_sec = root.section("mc")
    n_samples = mc_sec.take("n_samples", int, default=128,
                            check=lambda v: v >= 1, describe="must be >= 1")
    mc = McConfig(n_samples=n_samples, seed=mc_sec.take("seed", int, default=0))
    mc_sec.reject_unknown()

    f = root.section("fit")
    fit_cfg = FitConfig(
        n_restarts=f.take("n_restarts", int, default=5,
                          check=lambda v: v >= 1, describe="must be >= 1"),
        max_iter=f.take("max_iter", int, default=100,
                        check=lambda v: v >= 1, describe="must be >= 1"),
        seed=f.take("seed", int, default=0),
    )
    f.reject_unknown()

    i = root.section("init")
    n_init_low = i.take("n_low", int, default=20, check=lambda v: v >= 0,
                        describe="must be >= 0")
    n_init_high = i.take("n_high", int, default=5, check=lambda v: v >= 1,
                         describe="must be >= 1")
    init_design = i.take("design", str, default="uniform",
                         check=lambda v: v in ("uniform", "lhs"),
                         describe="must be 'uniform' or 'lhs'")
    raw_box = i.take("box", list, default=None)
    init_box = None
    if raw_box is not None:
        try:
            pairs = tuple((float(lo), float(hi)) for lo, hi in raw_box)
        except (TypeError, ValueError):
            raise ConfigError("init.box", "expected a list of [low, high] pairs")
        if len(pairs) != problem.dimension:
            raise ConfigError("init.box", "one [low, high] pair per dimension")
        for lo, hi in pairs:
            if not (0.0 <= lo < hi <= 1.0):
                raise ConfigError("init.box", "pairs must satisfy 0 <= low < high <= 1")
        init_box = pairs
    i.reject_unknown()
    if n_init_low < 1:
        raise ConfigError("init.n_low", "must be >= 1")

    output_dir = root.take("output_dir", str)
    max_failures = root.take("max_failures", int, default=20,
                             check=lambda v: v >= 1, describe="must be >= 1")
    timeout_secs = root.take("timeout_secs", float, default=30.0,
                             check=lambda v: v > 0, describe="must be positive")
    root.reject_unknown()

    return RunConfig(problem, tuple(seeds), fidelity, msp, mc, fit_cfg,
                     n_init_low, n_init_high, init_design, init_box,
                     output_dir, max_failures, timeout_secs)


def config_to_dict(rc: RunConfig) -> dict:
    """Canonical serialized form; parse(config_to_dict(c)) == c."""
    if rc.problem.evaluator_kind == "builtin":
        problem = {"builtin": rc.problem.evaluator_target}
    else:
        problem = {"external": {
            "name": rc.problem.name,
            "command": rc.problem.evaluator_target,
            "dimension": rc.problem.dimension,
            "n_constraints": rc.problem.n_constraints,
            "cost_ratio": rc.problem.cost_ratio,
            "bounds": [list(p) for p in rc.problem.bounds.pairs()],
        }}
    return {
        "problem": problem,
        "seeds": list(rc.seeds),
        "budget": {
            "total_equiv": rc.fidelity.total_budget_equiv,
            "gamma": rc.fidelity.gamma,
            "cost_ratio": rc.fidelity.cost_ratio,
            "high_budget": rc.fidelity.high_budget,
        },
        "msp": {
            "n_candidates": rc.msp.n_candidates,
            "frac_around_tau_l": rc.msp.frac_around_tau_l,
            "frac_around_tau_h": rc.msp.frac_around_tau_h,
            "anchor_radius": rc.msp.anchor_radius,
            "n_local_starts": rc.msp.n_local_starts,
            "local_iteration_cap": rc.msp.local_iteration_cap,
        },
        "mc": {"n_samples": rc.mc.n_samples, "seed": rc.mc.seed},
        "fit": {"n_restarts": rc.fit.n_restarts, "max_iter": rc.fit.max_iter,
                "seed": rc.fit.seed},
        "init": {"n_low": rc.n_init_low, "n_high": rc.n_init_high,
                 "design": rc.init_design,
                 "box": [list(p) for p in rc.init_box] if rc.init_box else None},
        "output_dir": rc.output_dir,
        "max_failures": rc.max_failures,
        "timeout_secs": rc.timeout_secs,
    }


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON: {exc}")
    return parse_config(data)


def _with_overrides(rc: RunConfig, args) -> RunConfig:
    data = config_to_dict(rc)
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
    if getattr(args, "budget", None) is not None:
        data["budget"]["total_equiv"] = args.budget
    if getattr(args, "output", None) is not None:
        data["output_dir"] = args.output
    if getattr(args, "timeout_secs", None) is not None:
        data["timeout_secs"] = args.timeout_secs
    return parse_config(data)


def _cost_ratio(rc: RunConfig) -> float:
    return rc.fidelity.cost_ratio if rc.fidelity.cost_ratio is not None \
        else rc.problem.cost_ratio


def build_optimizer_config(rc: RunConfig, seed: int,
                           single_fidelity: bool = False) -> OptimizerConfig:
    n_low, n_high = rc.n_init_low, rc.n_init_high
    if single_fidelity:
        # the baseline gets the same initial spend, all of it high-fidelity
        n_high = rc.n_init_high + int(round(rc.n_init_low / _cost_ratio(rc)))
        n_low = 0
    return OptimizerConfig(
        fidelity=rc.fidelity,
        msp=rc.msp,
        fit=rc.fit,
        mc=rc.mc,
        n_init_low=n_low,
        n_init_high=n_high,
        seed=seed,
        init_design=rc.init_design,
        init_box=rc.init_box,
        single_fidelity=single_fidelity,
        max_failures=rc.max_failures,
    )


# ------------------------------------------------------------- persistence

def write_checkpoint(path: Path, rc: RunConfig, seed: int,
                     single_fidelity: bool, state: RunState):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "single_fidelity": single_fidelity,
        "config": config_to_dict(rc),
        "state": state.to_payload(),
    }
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def read_checkpoint(path: Path) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}")
    except json.JSONDecodeError:
        raise CorruptCheckpoint(f"{path} is not a valid checkpoint (truncated?)")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CorruptCheckpoint(f"{path} lacks a format_version field")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(
            f"{path} has format version {payload['format_version']}, "
            f"this build reads version {CHECKPOINT_VERSION}")
    for key in ("seed", "single_fidelity", "config", "state"):
        if key not in payload:
            raise CorruptCheckpoint(f"{path} is missing the '{key}' field")
    return payload


def _truncate_events(path: Path, keep: int):
    """Drop any event lines past the checkpointed count (torn writes)."""
    if not path.exists():
        if keep:
            raise CorruptCheckpoint(f"{path} is missing but checkpoint expects "
                                    f"{keep} events")
        return
    with open(path) as fh:
        lines = fh.readlines()
    if len(lines) < keep:
        raise CorruptCheckpoint(f"{path} has {len(lines)} events, checkpoint "
                                f"expects {keep}")
    if len(lines) > keep:
        with open(path, "w") as fh:
            fh.writelines(lines[:keep])


class _EventWriter:
    def __init__(self, fh):
        self.fh = fh

    def __call__(self, event: dict):
        self.fh.write(json.dumps(event) + "\n")
        self.fh.flush()
        if event.get("type") == "iteration":
            logger.info("iter %s: fidelity=%s status=%s spent=%.3f",
                        event["iteration"], event["fidelity"], event["status"],
                        event["spent_equiv"])


def _drive(problem: Problem, cfg: OptimizerConfig, rc: RunConfig, seed: int,
           single_fidelity: bool, state: Optional[RunState], events_fh,
           ckpt_path: Path, max_iterations: Optional[int]) -> Tuple[RunState, bool]:
    """Run the loop with per-iteration checkpointing; returns (state, paused)."""
    writer = _EventWriter(events_fh)
    if state is None:
        state = initialize(problem, cfg, on_event=writer)
        write_checkpoint(ckpt_path, rc, seed, single_fidelity, state)
    steps = 0
    while state.spent_equiv < cfg.fidelity.total_budget_equiv:
        if max_iterations is not None and steps >= max_iterations:
            return state, True
        state = step(problem, cfg, state, on_event=writer)
        write_checkpoint(ckpt_path, rc, seed, single_fidelity, state)
        steps += 1
    return state, False


def run_one_seed(rc: RunConfig, seed: int, seed_dir: Path, overwrite: bool,
                 single_fidelity: bool,
                 max_iterations: Optional[int]) -> Tuple[RunState, bool]:
    events_path = seed_dir / "events.jsonl"
    if events_path.exists() and not overwrite:
        raise OutputExists(f"{events_path} exists; pass --overwrite to replace it")
    seed_dir.mkdir(parents=True, exist_ok=True)
    for stale in (events_path, seed_dir / "checkpoint.bin"):
        if stale.exists():
            stale.unlink()
    cfg = build_optimizer_config(rc, seed, single_fidelity)
    logger.info("seed %d: starting (%s)", seed,
                "single-fidelity" if single_fidelity else "multi-fidelity")
    with make_problem(rc.problem, timeout_secs=rc.timeout_secs) as problem, \
            open(events_path, "a") as fh:
        return _drive(problem, cfg, rc, seed, single_fidelity, None, fh,
                      seed_dir / "checkpoint.bin", max_iterations)


# ------------------------------------------------------------------ reports

def load_events(seed_dir: Path) -> List[dict]:
    with open(seed_dir / "events.jsonl") as fh:
        return [json.loads(line) for line in fh]


def _is_feasible_high(event: dict) -> bool:
    return (event["status"] == "ok" and event["fidelity"] == "high"
            and all(c < 0.0 for c in event["constraints"]))


def trace_rows(events: Sequence[dict]) -> List[dict]:
    """Best-feasible-so-far (high fidelity) after each evaluation."""
    best = math.inf
    rows = []
    for idx, ev in enumerate(events):
        if _is_feasible_high(ev):
            best = min(best, ev["objective"])
        rows.append({
            "index": idx,
            "type": ev["type"],
            "fidelity": ev["fidelity"],
            "status": ev["status"],
            "objective": ev["objective"],
            "spent_equiv": ev["spent_equiv"],
            "best_feasible": None if math.isinf(best) else best,
        })
    return rows


def seed_summary(events: Sequence[dict]) -> dict:
    rows = trace_rows(events)
    last = rows[-1] if rows else {"spent_equiv": 0.0, "best_feasible": None}
    n_low = sum(1 for e in events if e["status"] == "ok" and e["fidelity"] == "low")
    n_high = sum(1 for e in events if e["status"] == "ok" and e["fidelity"] == "high")
    n_failed = sum(1 for e in events if e["status"] == "failed")
    return {
        "best_feasible": last["best_feasible"],
        "n_low": n_low,
        "n_high": n_high,
        "n_failed": n_failed,
        "spent_equiv": last["spent_equiv"],
        "success": last["best_feasible"] is not None,
    }


def _seed_dirs(run_dir: Path) -> List[Tuple[int, Path]]:
    found = []
    for child in sorted(run_dir.glob("seed*")):
        if child.is_dir() and (child / "events.jsonl").exists():
            found.append((int(child.name[4:]), child))
    return sorted(found)


_SUMMARY_FIELDS = ["seed", "best_feasible", "n_low", "n_high", "n_failed",
                   "spent_equiv", "success"]


def aggregate(summaries: dict) -> dict:
    """Aggregate rows over seeds; objective stats cover successful seeds."""
    bests = [s["best_feasible"] for s in summaries.values() if s["success"]]
    agg = {
        "mean": statistics.fmean(bests) if bests else None,
        "median": statistics.median(bests) if bests else None,
        "best": min(bests) if bests else None,
        "worst": max(bests) if bests else None,
        "avg_sim_equiv": statistics.fmean(s["spent_equiv"]
                                          for s in summaries.values()),
        "success": sum(1 for s in summaries.values() if s["success"]),
        "n_seeds": len(summaries),
    }
    return agg


def write_report_csv(path: Path, summaries: dict):
    agg = aggregate(summaries)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_SUMMARY_FIELDS)
        for seed, s in sorted(summaries.items()):
            w.writerow([seed] + [s[k] for k in _SUMMARY_FIELDS[1:]])
        w.writerow([])
        w.writerow(["statistic", "value"])
        for key in ("mean", "median", "best", "worst", "avg_sim_equiv",
                    "success", "n_seeds"):
            w.writerow([key, agg[key]])


def write_trace_csv(path: Path, per_seed: dict, method: str):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "index", "type", "fidelity", "status",
                    "objective", "spent_equiv", "best_feasible"])
        for seed, rows in sorted(per_seed.items()):
            for r in rows:
                w.writerow([method, seed, r["index"], r["type"], r["fidelity"],
                            r["status"], r["objective"], r["spent_equiv"],
                            r["best_feasible"]])


def refresh_reports(run_dir: Path, method: str = "multi_fidelity") -> dict:
    """Recompute report.csv and trace.csv from the raw event logs."""
    dirs = _seed_dirs(run_dir)
    if not dirs:
        raise FileNotFoundError(f"no seed directories with events under {run_dir}")
    summaries, traces = {}, {}
    for seed, seed_dir in dirs:
        events = load_events(seed_dir)
        summaries[seed] = seed_summary(events)
        traces[seed] = trace_rows(events)
    write_report_csv(run_dir / "report.csv", summaries)
    write_trace_csv(run_dir / "trace.csv", traces, method)
    return summaries


def cost_to_target(rows: Sequence[dict], target: float) -> Optional[float]:
    for r in rows:
        if r["best_feasible"] is not None and r["best_feasible"] <= target:
            return r["spent_equiv"]
    return None


# ----------------------------------------------------------------- commands

def _print_summary(title: str, summaries: dict):
    agg = aggregate(summaries)
    print(title)
    for key in ("mean", "median", "best", "worst"):
        value = agg[key]
        print(f"  {key:>14}: {value:.6g}" if value is not None
              else f"  {key:>14}: n/a")
    print(f"  {'avg_sim_equiv':>14}: {agg['avg_sim_equiv']:.6g}")
    print(f"  {'success':>14}: {agg['success']}/{agg['n_seeds']}")


def _check_config_collision(out_dir: Path, rc: RunConfig, overwrite: bool):
    cfg_path = out_dir / "config.json"
    if cfg_path.exists() and not overwrite:
        with open(cfg_path) as fh:
            existing = json.load(fh)
        if existing != config_to_dict(rc):
            raise OutputExists(
                f"{cfg_path} holds a different configuration; "
                "pass --overwrite or choose another output_dir")


def cmd_run(args) -> int:
    rc = _with_overrides(load_config(args.config), args)
    out_dir = Path(rc.output_dir)
    _check_config_collision(out_dir, rc, args.overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config_to_dict(rc), fh, indent=2)
    paused_any = False
    for seed in rc.seeds:
        _, paused = run_one_seed(rc, seed, out_dir / f"seed{seed}",
                                 args.overwrite, False, args.max_iterations)
        paused_any = paused_any or paused
    summaries = refresh_reports(out_dir)
    _print_summary(f"run: {rc.problem.name}, {len(rc.seeds)} seed(s)", summaries)
    if paused_any:
        print(f"paused after {args.max_iterations} iteration(s); "
              f"resume with: mfbo resume <seed-dir>/checkpoint.bin")
    return 0


def cmd_resume(args) -> int:
    ckpt_path = Path(args.checkpoint)
    payload = read_checkpoint(ckpt_path)
    try:
        rc = parse_config(payload["config"])
    except ConfigError as exc:
        raise CorruptCheckpoint(f"embedded config is invalid: {exc}")
    if args.timeout_secs is not None:
        rc = _with_overrides(rc, args)
    seed = payload["seed"]
    single_fidelity = payload["single_fidelity"]
    try:
        state = RunState.from_payload(payload["state"], rc.problem.dimension,
                                      rc.problem.n_constraints)
    except (ContractViolation, KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"state payload is invalid: {exc}")

    if state.spent_equiv >= rc.fidelity.total_budget_equiv:
        print("budget exhausted; nothing to resume")
        return 0

    seed_dir = ckpt_path.parent
    events_path = seed_dir / "events.jsonl"
    _truncate_events(events_path, state.events_written)
    cfg = build_optimizer_config(rc, seed, single_fidelity)
    logger.info("resuming seed %d at iteration %d", seed, state.iteration)
    with make_problem(rc.problem, timeout_secs=rc.timeout_secs) as problem, \
            open(events_path, "a") as fh:
        state, paused = _drive(problem, cfg, rc, seed, single_fidelity, state,
                               fh, ckpt_path, args.max_iterations)
    run_dir = seed_dir.parent
    if (run_dir / "config.json").exists():
        refresh_reports(run_dir)
    if paused:
        print(f"paused after {args.max_iterations} iteration(s)")
    else:
        print(f"seed {seed} complete: spent_equiv={state.spent_equiv:.3f}")
    return 0


def _compare_table(mf_agg: Optional[dict], sf_agg: Optional[dict]) -> List[List]:
    rows = [["metric", "multi_fidelity", "single_fidelity"]]
    for key in ("mean", "median", "best", "worst", "avg_sim_equiv", "success"):
        rows.append([key,
                     mf_agg[key] if mf_agg else None,
                     sf_agg[key] if sf_agg else None])
    return rows


def cmd_compare(args) -> int:
    rc = _with_overrides(load_config(args.config), args)
    out_dir = Path(rc.output_dir)
    _check_config_collision(out_dir, rc, args.overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config_to_dict(rc), fh, indent=2)

    methods = [("baseline", "single_fidelity", True)]
    if not args.baseline_only:
        methods.insert(0, ("mf", "multi_fidelity", False))

    summaries, traces = {}, {}
    for subdir, method, single in methods:
        for seed in rc.seeds:
            run_one_seed(rc, seed, out_dir / subdir / f"seed{seed}",
                         args.overwrite, single, None)
        summaries[method] = refresh_reports(out_dir / subdir, method)
        traces[method] = {seed: trace_rows(load_events(out_dir / subdir / f"seed{seed}"))
                          for seed in rc.seeds}

    mf_agg = aggregate(summaries["multi_fidelity"]) \
        if "multi_fidelity" in summaries else None
    sf_agg = aggregate(summaries["single_fidelity"])
    table = _compare_table(mf_agg, sf_agg)
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(table)

    merged = {}
    for method, per_seed in traces.items():
        for seed, rows in per_seed.items():
            merged[(method, seed)] = rows
    with open(out_dir / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "index", "type", "fidelity", "status",
                    "objective", "spent_equiv", "best_feasible"])
        for (method, seed), rows in sorted(merged.items()):
            for r in rows:
                w.writerow([method, seed, r["index"], r["type"], r["fidelity"],
                            r["status"], r["objective"], r["spent_equiv"],
                            r["best_feasible"]])

    if rc.problem.evaluator_kind == "builtin" and not args.baseline_only:
        oracle = grid_oracle(rc.problem.name)
        target = oracle.f_star + args.target_frac * oracle.f_scale
        with open(out_dir / "paired.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "target", "cost_to_target_mf",
                        "cost_to_target_sf"])
            for seed in rc.seeds:
                w.writerow([seed, target,
                            cost_to_target(traces["multi_fidelity"][seed], target),
                            cost_to_target(traces["single_fidelity"][seed], target)])

    widths = [max(len(str(r[i])) for r in table) for i in range(3)]
    for r in table:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if (run_dir / "mf").is_dir() or (run_dir / "baseline").is_dir():
        table_parts = {}
        for subdir, method in (("mf", "multi_fidelity"),
                               ("baseline", "single_fidelity")):
            if (run_dir / subdir).is_dir():
                table_parts[method] = refresh_reports(run_dir / subdir, method)
                _print_summary(f"{method} ({subdir}/)", table_parts[method])
        if not table_parts:
            raise FileNotFoundError(f"no run data under {run_dir}")
        return 0
    summaries = refresh_reports(run_dir)
    _print_summary(str(run_dir), summaries)
    return 0


# --------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfbo",
        description="Constrained multi-fidelity Bayesian optimization runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared_run_flags(p):
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--budget", type=float,
                       help="override total budget (high-equivalent units)")
        p.add_argument("--output", help="override output directory")
        p.add_argument("--overwrite", action="store_true",
                       help="replace existing output for the same seeds")
        p.add_argument("--timeout-secs", type=float, dest="timeout_secs",
                       help="external evaluator response timeout")
        p.add_argument("--max-iterations", type=int, dest="max_iterations",
                       help="pause after this many loop iterations (resumable)")

    p_run = sub.add_parser("run", help="execute the optimizer per seed")
    p_run.add_argument("config", help="path to a JSON config file")
    shared_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_resume = sub.add_parser("resume", help="continue from a checkpoint")
    p_resume.add_argument("checkpoint", help="path to a checkpoint.bin")
    p_resume.add_argument("--timeout-secs", type=float, dest="timeout_secs")
    p_resume.add_argument("--max-iterations", type=int, dest="max_iterations")
    p_resume.set_defaults(func=cmd_resume)

    p_cmp = sub.add_parser("compare",
                           help="multi-fidelity vs single-fidelity baseline")
    p_cmp.add_argument("config")
    shared_run_flags(p_cmp)
    p_cmp.add_argument("--baseline-only", action="store_true",
                       dest="baseline_only",
                       help="run only the single-fidelity baseline")
    p_cmp.add_argument("--target-frac", type=float, default=0.10,
                       dest="target_frac",
                       help="cost-to-target threshold as a fraction of the "
                            "objective spread above the oracle optimum")
    p_cmp.set_defaults(func=cmd_compare)

    p_rep = sub.add_parser("report", help="recompute CSV reports from logs")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("MFBO_LOG_LEVEL", "warning").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except CorruptCheckpoint as exc:
        print(f"CorruptCheckpoint: {exc}", file=sys.stderr)
        return 1
    except (OutputExists, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
