"""Tests for the command-line runner: config handling, persistence,
resume semantics, and the comparison workflow."""

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mfbo.cli import (
    ConfigError,
    config_to_dict,
    load_config,
    main,
    parse_config,
)
from mfbo.fusion import FidelityLevel
from mfbo.problems import make_problem


def base_config(out_dir, **extra):
    cfg = {
        "problem": {"builtin": "constrained2d"},
        "seeds": [0],
        "budget": {"total_equiv": 3.0},
        "msp": {"n_candidates": 20, "n_local_starts": 2, "local_iteration_cap": 15},
        "mc": {"n_samples": 16},
        "fit": {"n_restarts": 2, "max_iter": 40},
        "init": {"n_low": 4, "n_high": 2},
        "output_dir": str(out_dir),
    }
    cfg.update(extra)
    return cfg


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_events(seed_dir):
    with open(Path(seed_dir) / "events.jsonl") as fh:
        return [json.loads(line) for line in fh]


def strip_volatile(events):
    return [{k: v for k, v in e.items() if k != "wall_time"} for e in events]


# ------------------------------------------------------------------ config

def test_config_round_trip(tmp_path):
    cfg = base_config(tmp_path / "out")
    rc = parse_config(cfg)
    again = parse_config(config_to_dict(rc))
    assert config_to_dict(rc) == config_to_dict(again)


def test_config_round_trip_external(tmp_path):
    cfg = base_config(tmp_path / "out")
    cfg["problem"] = {"external": {
        "name": "sim", "command": "simulate --fast", "dimension": 3,
        "n_constraints": 2, "cost_ratio": 12.5,
        "bounds": [[0, 1], [-5, 5], [2, 4]],
    }}
    rc = parse_config(cfg)
    assert rc.problem.evaluator_kind == "external"
    assert rc.problem.bounds.pairs() == [(0.0, 1.0), (-5.0, 5.0), (2.0, 4.0)]
    assert config_to_dict(parse_config(config_to_dict(rc))) == config_to_dict(rc)


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c["budget"].update(gamma=-0.5), "budget.gamma"),
    (lambda c: c["budget"].pop("total_equiv"), "budget.total_equiv"),
    (lambda c: c.update(seeds=[]), "seeds"),
    (lambda c: c.update(seeds=[0, "x"]), "seeds"),
    (lambda c: c["init"].update(n_high=0), "init.n_high"),
    (lambda c: c["init"].update(box=[[0.2, 1.4], [0, 1]]), "init.box"),
    (lambda c: c.update(problem={}), "problem"),
    (lambda c: c.update(problem={"builtin": "nope"}), "problem.builtin"),
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c["msp"].update(frac_around_tau_l=0.9), "msp"),
])
def test_config_errors_name_the_field(tmp_path, mutate, field):
    cfg = base_config(tmp_path / "out")
    mutate(cfg)
    with pytest.raises(ConfigError) as err:
        parse_config(cfg)
    assert field in str(err.value)


def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = base_config(tmp_path / "out")
    cfg["budget"]["gamma"] = -1.0
    code = main(["run", write_config(tmp_path, cfg)])
    assert code == 2
    assert "budget.gamma" in capsys.readouterr().err


def test_unparseable_config_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{ not json")
    assert main(["run", str(path)]) == 2


# ------------------------------------------------------------------- run

def test_run_smoke(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", write_config(tmp_path, base_config(out))])
    assert code == 0
    assert (out / "config.json").exists()
    assert (out / "seed0" / "events.jsonl").exists()
    assert (out / "seed0" / "checkpoint.bin").exists()
    assert (out / "report.csv").exists()
    assert (out / "trace.csv").exists()
    captured = capsys.readouterr().out
    assert "success" in captured

    events = read_events(out / "seed0")
    assert sum(1 for e in events if e["type"] == "init") == 6
    assert events[-1]["spent_equiv"] >= 3.0


def test_run_refuses_overwrite(tmp_path, capsys):
    cfg_path = write_config(tmp_path, base_config(tmp_path / "out"))
    assert main(["run", cfg_path]) == 0
    assert main(["run", cfg_path]) == 1
    assert "--overwrite" in capsys.readouterr().err
    assert main(["run", cfg_path, "--overwrite"]) == 0


def test_run_seed_and_budget_overrides(tmp_path):
    out = tmp_path / "out"
    cfg = base_config(out, seeds=[0, 1])
    code = main(["run", write_config(tmp_path, cfg), "--seed", "7",
                 "--budget", "2.5"])
    assert code == 0
    assert (out / "seed7").is_dir()
    assert not (out / "seed0").exists()
    saved = json.loads((out / "config.json").read_text())
    assert saved["seeds"] == [7]
    assert saved["budget"]["total_equiv"] == 2.5


def test_logged_evaluations_replay_exactly(tmp_path):
    out = tmp_path / "out"
    assert main(["run", write_config(tmp_path, base_config(out))]) == 0
    events = read_events(out / "seed0")
    with make_problem("constrained2d") as prob:
        for e in events:
            if e["status"] != "ok":
                continue
            level = FidelityLevel(e["fidelity"])
            rec = prob.evaluate(np.array(e["x"]), level)
            assert rec.objective == e["objective"]
            assert list(rec.constraints) == e["constraints"]


def test_report_recomputes_from_logs(tmp_path):
    out = tmp_path / "out"
    assert main(["run", write_config(tmp_path, base_config(out))]) == 0
    report = (out / "report.csv").read_text()
    trace = (out / "trace.csv").read_text()
    (out / "report.csv").unlink()
    (out / "trace.csv").unlink()
    assert main(["report", str(out)]) == 0
    assert (out / "report.csv").read_text() == report
    assert (out / "trace.csv").read_text() == trace


def test_report_missing_dir_fails(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nothing")]) == 1


# ------------------------------------------------------------------ resume

def resume_config(out_dir):
    # cheap 1-d problem with a budget that needs at least 3 loop
    # iterations whatever the fidelity routing does (init costs 2.8,
    # a high step costs 1), so pausing after 2 leaves real work
    cfg = base_config(out_dir)
    cfg["problem"] = {"builtin": "forrester-nl"}
    cfg["budget"]["total_equiv"] = 5.0
    return cfg


def run_paused(tmp_path, pause_after=2):
    """Full run in one dir, paused run in another; returns (dirs, ckpt)."""
    straight_out = tmp_path / "straight"
    assert main(["run", write_config(tmp_path, resume_config(straight_out),
                                     "straight.json")]) == 0
    paused_out = tmp_path / "paused"
    cfg_path = write_config(tmp_path, resume_config(paused_out), "paused.json")
    assert main(["run", cfg_path, "--max-iterations", str(pause_after)]) == 0
    ckpt = paused_out / "seed0" / "checkpoint.bin"
    state = json.loads(ckpt.read_text())["state"]
    assert state["spent_equiv"] < 5.0, "pause point must precede completion"
    return straight_out, paused_out, ckpt


def test_resume_matches_uninterrupted(tmp_path):
    straight_out, paused_out, ckpt = run_paused(tmp_path)
    assert main(["resume", str(ckpt)]) == 0
    a = strip_volatile(read_events(straight_out / "seed0"))
    b = strip_volatile(read_events(paused_out / "seed0"))
    assert a == b
    ca = json.loads((straight_out / "seed0" / "checkpoint.bin").read_text())
    cb = json.loads(ckpt.read_text())
    assert ca["state"] == cb["state"]
    # reports regenerated after resume match the uninterrupted run's
    assert (straight_out / "report.csv").read_text() == \
        (paused_out / "report.csv").read_text()


def test_resume_truncates_torn_event_tail(tmp_path):
    straight_out, paused_out, ckpt = run_paused(tmp_path)
    events_path = paused_out / "seed0" / "events.jsonl"
    with open(events_path, "a") as fh:
        fh.write('{"type": "iteration", "torn": tru')  # crash mid-write
    assert main(["resume", str(ckpt)]) == 0
    a = strip_volatile(read_events(straight_out / "seed0"))
    b = strip_volatile(read_events(paused_out / "seed0"))
    assert a == b


def test_resume_completed_run_is_noop(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", write_config(tmp_path, base_config(out))]) == 0
    before = (out / "seed0" / "events.jsonl").read_text()
    assert main(["resume", str(out / "seed0" / "checkpoint.bin")]) == 0
    assert "budget exhausted" in capsys.readouterr().out
    assert (out / "seed0" / "events.jsonl").read_text() == before


def test_resume_corrupt_checkpoint(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", write_config(tmp_path, base_config(out))]) == 0
    ckpt = out / "seed0" / "checkpoint.bin"
    ckpt.write_text(ckpt.read_text()[:50])  # truncate
    assert main(["resume", str(ckpt)]) == 1
    assert "CorruptCheckpoint" in capsys.readouterr().err


def test_resume_version_mismatch(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", write_config(tmp_path, base_config(out))]) == 0
    ckpt = out / "seed0" / "checkpoint.bin"
    payload = json.loads(ckpt.read_text())
    payload["format_version"] = 99
    ckpt.write_text(json.dumps(payload))
    assert main(["resume", str(ckpt)]) == 1
    err = capsys.readouterr().err
    assert "CorruptCheckpoint" in err and "version" in err


# ----------------------------------------------------------------- compare

def test_compare_smoke(tmp_path, capsys):
    out = tmp_path / "cmp"
    cfg = base_config(out, seeds=[0, 1])
    cfg["budget"]["total_equiv"] = 2.6
    code = main(["compare", write_config(tmp_path, cfg)])
    assert code == 0
    table = list(csv.reader(open(out / "compare.csv")))
    assert table[0] == ["metric", "multi_fidelity", "single_fidelity"]
    assert [r[0] for r in table[1:]] == ["mean", "median", "best", "worst",
                                         "avg_sim_equiv", "success"]
    assert (out / "mf" / "report.csv").exists()
    assert (out / "baseline" / "report.csv").exists()
    assert (out / "paired.csv").exists()
    paired = list(csv.reader(open(out / "paired.csv")))
    assert paired[0] == ["seed", "target", "cost_to_target_mf", "cost_to_target_sf"]
    assert len(paired) == 3  # header + 2 seeds
    stdout = capsys.readouterr().out
    assert "multi_fidelity" in stdout and "success" in stdout
    # baseline spent only high-fidelity evaluations
    for e in read_events(out / "baseline" / "seed0"):
        assert e["fidelity"] == "high"


def test_compare_baseline_only(tmp_path):
    out = tmp_path / "cmp"
    cfg = base_config(out)
    cfg["budget"]["total_equiv"] = 2.6
    assert main(["compare", write_config(tmp_path, cfg), "--baseline-only"]) == 0
    assert not (out / "mf").exists()
    assert not (out / "paired.csv").exists()
    table = list(csv.reader(open(out / "compare.csv")))
    by_name = {r[0]: r for r in table[1:]}
    assert by_name["success"][1] == ""  # no multi-fidelity column values
    assert by_name["success"][2] != ""


def test_compare_baseline_init_is_cost_equalized(tmp_path):
    out = tmp_path / "cmp"
    cfg = base_config(out)
    cfg["budget"]["total_equiv"] = 2.6
    cfg["init"] = {"n_low": 20, "n_high": 2}
    assert main(["compare", write_config(tmp_path, cfg), "--baseline-only",
                 "--seed", "0"]) == 0
    events = read_events(out / "baseline" / "seed0")
    inits = [e for e in events if e["type"] == "init"]
    # 2 high + round(20 low / cost ratio 20) = 3 initial high points
    assert len(inits) == 3
    assert all(e["fidelity"] == "high" for e in inits)


# ------------------------------------------------------------- entry point

def test_module_entry_point(tmp_path):
    out = tmp_path / "out"
    cfg_path = write_config(tmp_path, base_config(out))
    proc = subprocess.run(
        [sys.executable, "-m", "mfbo", "run", cfg_path, "--max-iterations", "0"],
        capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert (out / "seed0" / "checkpoint.bin").exists()

    bad = subprocess.run(
        [sys.executable, "-m", "mfbo", "run", str(tmp_path / "missing.json")],
        capture_output=True, text=True, timeout=60)
    assert bad.returncode == 2
