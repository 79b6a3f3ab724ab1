"""Tests for builtin benchmark problems and the external evaluator client."""

import math
import shlex
import sys
import time

import numpy as np
import pytest
from scipy import stats

from mfbo.fusion import FidelityLevel
from mfbo.gp import ContractViolation
from mfbo.problems import (
    Bounds,
    EvalStatus,
    ExternalEvaluatorClient,
    ProblemSpec,
    builtin_constrained2d,
    builtin_constrained2d_tight,
    builtin_forrester_nl,
    builtin_names,
    builtin_spec,
    grid_oracle,
    make_problem,
)

LOW = FidelityLevel.LOW
HIGH = FidelityLevel.HIGH


def evaluator_command(tmp_path, source, name="evaluator.py"):
    path = tmp_path / name
    path.write_text(source)
    return f"{shlex.quote(sys.executable)} {shlex.quote(str(path))}"


# ---------------------------------------------------------------- bounds

def test_bounds_round_trip():
    b = Bounds(np.array([-2.0, 0.5]), np.array([3.0, 1.5]))
    rng = np.random.default_rng(0)
    x = rng.uniform([-2.0, 0.5], [3.0, 1.5], size=(40, 2))
    u = b.to_unit(x)
    assert np.all(u >= 0) and np.all(u <= 1)
    np.testing.assert_allclose(b.from_unit(u), x, rtol=0, atol=1e-12)


def test_bounds_contains():
    b = Bounds.from_pairs([(0.0, 1.0), (0.0, 2.0)])
    assert b.contains([0.5, 1.9])
    assert b.contains([0.0, 2.0])
    assert not b.contains([1.1, 0.5])


def test_bounds_rejects_inverted():
    with pytest.raises(ContractViolation):
        Bounds(np.array([1.0]), np.array([0.0]))


def test_spec_validation():
    b = Bounds(np.zeros(2), np.ones(2))
    with pytest.raises(ContractViolation):
        ProblemSpec("bad", 3, b, 0, "builtin", "x", 5.0)
    with pytest.raises(ContractViolation):
        ProblemSpec("bad", 2, b, 0, "builtin", "x", -1.0)
    with pytest.raises(ContractViolation):
        ProblemSpec("bad", 2, b, 0, "magic", "x", 5.0)


# ---------------------------------------------------------------- builtins

def test_registry_contents():
    assert builtin_names() == ["constrained2d", "constrained2d-tight", "forrester-nl"]
    assert builtin_spec("forrester-nl").dimension == 1
    assert builtin_spec("forrester-nl").n_constraints == 0
    assert builtin_spec("constrained2d").n_constraints == 1
    assert builtin_spec("constrained2d").cost_ratio == 20.0
    with pytest.raises(ContractViolation):
        builtin_spec("nope")


def test_forrester_values():
    rec = builtin_forrester_nl([0.0625], HIGH)
    assert rec.status is EvalStatus.OK
    assert rec.constraints == ()
    assert rec.wall_time >= 0
    # sin(8*pi*0.0625) = sin(pi/2) = 1, so high = 0.0625 - sqrt(2)
    assert rec.objective == pytest.approx(0.0625 - math.sqrt(2), abs=1e-12)
    assert rec.objective == pytest.approx(-1.351714, abs=1e-6)

    low = builtin_forrester_nl([0.0625], LOW)
    assert low.objective == pytest.approx(1.0, abs=1e-12)


def test_forrester_rejects_out_of_bounds():
    with pytest.raises(ContractViolation):
        builtin_forrester_nl([1.5], HIGH)
    with pytest.raises(ContractViolation):
        builtin_forrester_nl([0.2, 0.3], HIGH)


def test_forrester_low_is_not_affine_in_high():
    # No affine map a*low + b can explain the high fidelity: the best
    # least-squares fit must leave a large residual.
    xs = np.linspace(0, 1, 512)
    f_low = np.array([builtin_forrester_nl([x], LOW).objective for x in xs])
    f_high = np.array([builtin_forrester_nl([x], HIGH).objective for x in xs])
    A = np.column_stack([f_low, np.ones_like(f_low)])
    coef, *_ = np.linalg.lstsq(A, f_high, rcond=None)
    rmse = math.sqrt(np.mean((f_high - A @ coef) ** 2))
    assert rmse > 0.3


def test_constrained2d_values():
    rec = builtin_constrained2d([0.3, 0.7], HIGH)
    assert rec.objective == pytest.approx(0.0, abs=1e-14)
    assert rec.constraints[0] == pytest.approx(-0.75, abs=1e-12)
    assert rec.feasible()

    infeasible = builtin_constrained2d([0.1, 0.1], HIGH)
    assert infeasible.constraints[0] == pytest.approx(0.05, abs=1e-12)
    assert not infeasible.feasible()

    x1, x2 = 0.5, 0.5
    low = builtin_constrained2d([x1, x2], LOW)
    f_h = (x1 - 0.3) ** 2 + (x2 - 0.7) ** 2
    assert low.objective == pytest.approx(
        0.8 * f_h + 0.3 * math.sin(3 * x1) * math.cos(2 * x2), abs=1e-12)
    assert low.constraints[0] == pytest.approx(
        0.25 - x1 - x2 + 0.05 * math.sin(5 * x1), abs=1e-12)


def test_constrained2d_fidelities_rank_correlated():
    # The low fidelity is biased but orders the design space like the
    # high fidelity, both for the objective and the constraint.
    g = np.linspace(0, 1, 60)
    pts = [(a, b) for a in g for b in g]
    f_low, f_high, c_low, c_high = [], [], [], []
    for x in pts:
        lo = builtin_constrained2d(list(x), LOW)
        hi = builtin_constrained2d(list(x), HIGH)
        f_low.append(lo.objective)
        f_high.append(hi.objective)
        c_low.append(lo.constraints[0])
        c_high.append(hi.constraints[0])
    rho_f = stats.spearmanr(f_low, f_high).statistic
    rho_c = stats.spearmanr(c_low, c_high).statistic
    assert rho_f >= 0.8
    assert rho_c >= 0.8


def test_tight_variant_excludes_unconstrained_minimum():
    rec = builtin_constrained2d_tight([0.3, 0.7], HIGH)
    assert rec.constraints[0] > 0  # 1.4 - 1.0
    assert not rec.feasible()
    boundary = builtin_constrained2d_tight([0.5, 0.95], HIGH)
    assert boundary.feasible()


# ---------------------------------------------------------------- oracle

def test_grid_oracle_forrester():
    info = grid_oracle("forrester-nl", n=2048)
    xs = np.linspace(0, 1, 2048)
    f = (xs - math.sqrt(2)) * np.sin(8 * np.pi * xs) ** 2
    assert info.f_star == pytest.approx(f.min(), abs=1e-12)
    assert info.f_scale > 0
    # the (x - sqrt 2) factor is most negative at small x, so the
    # global minimum sits at the first peak of sin^2, near x = 1/16
    assert 0.0 < info.x_star[0] < 0.1
    assert info.f_star == pytest.approx(0.0625 - math.sqrt(2), abs=1e-3)


def test_grid_oracle_constrained2d():
    info = grid_oracle("constrained2d")
    assert info.f_star == pytest.approx(0.0, abs=1e-4)
    np.testing.assert_allclose(info.x_star, [0.3, 0.7], atol=0.01)
    assert info.f_scale > 0.05
    # the reported point is feasible for the real constraint
    assert builtin_constrained2d(info.x_star, HIGH).feasible()


def test_grid_oracle_tight():
    info = grid_oracle("constrained2d-tight")
    assert info.f_star == pytest.approx(0.08, abs=0.01)
    np.testing.assert_allclose(info.x_star, [0.5, 0.9], atol=0.05)
    assert builtin_constrained2d_tight(info.x_star, HIGH).feasible()


def test_grid_oracle_bounds_probes():
    info = grid_oracle("constrained2d")
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.uniform(0, 1, size=2)
        rec = builtin_constrained2d(x, HIGH)
        if rec.feasible():
            assert rec.objective >= info.f_star - 1e-9


# ---------------------------------------------------------------- external client

ECHO_EVALUATOR = """\
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    x = req["x"]
    obj = sum(x)
    if req["fidelity"] == "high":
        obj = 2.0 * obj
    print(json.dumps({"id": req["id"], "objective": obj,
                      "constraints": [x[0] - 0.5]}), flush=True)
"""


def test_external_round_trip(tmp_path):
    cmd = evaluator_command(tmp_path, ECHO_EVALUATOR)
    with ExternalEvaluatorClient(cmd, n_constraints=1, timeout_secs=10) as client:
        rec = client.evaluate([0.25, 0.5], LOW)
        assert rec.status is EvalStatus.OK
        assert rec.objective == pytest.approx(0.75, abs=1e-15)
        assert rec.constraints == (-0.25,)
        assert rec.fidelity is LOW

        rec2 = client.evaluate([0.25, 0.5], HIGH)
        assert rec2.objective == pytest.approx(1.5, abs=1e-15)


def test_external_preserves_float_precision(tmp_path):
    # JSON floats are emitted with repr, which round-trips doubles
    # exactly; a value like pi/3 must come back bit-identical.
    cmd = evaluator_command(tmp_path, ECHO_EVALUATOR)
    with ExternalEvaluatorClient(cmd, n_constraints=1, timeout_secs=10) as client:
        for v in (math.pi / 3, 0.1 + 0.2, 1e-17, 123456.789012345678):
            rec = client.evaluate([v, 0.0], LOW)
            assert rec.objective == v
            assert rec.constraints[0] == v - 0.5


def test_external_sequential_ids(tmp_path):
    cmd = evaluator_command(tmp_path, ECHO_EVALUATOR)
    with ExternalEvaluatorClient(cmd, n_constraints=1, timeout_secs=10) as client:
        for i in range(10):
            rec = client.evaluate([float(i), 0.0], LOW)
            assert rec.ok


def test_external_timeout_kills_child(tmp_path):
    source = "import sys, time\nfor line in sys.stdin:\n    time.sleep(30)\n"
    cmd = evaluator_command(tmp_path, source)
    client = ExternalEvaluatorClient(cmd, n_constraints=0, timeout_secs=0.5)
    rec = client.evaluate([0.1], LOW)
    assert rec.status is EvalStatus.FAILED
    assert rec.error.startswith("Timeout")
    assert rec.wall_time >= 0.5
    assert math.isnan(rec.objective)
    assert client._proc is None  # child was reaped
    client.close()


def test_external_child_exit(tmp_path):
    cmd = evaluator_command(tmp_path, "import sys\nsys.exit(3)\n")
    client = ExternalEvaluatorClient(cmd, n_constraints=0, timeout_secs=5)
    rec = client.evaluate([0.1], LOW)
    assert rec.status is EvalStatus.FAILED
    assert "ChildExit" in rec.error
    client.close()


ONE_SHOT_EVALUATOR = """\
import json, sys
line = sys.stdin.readline()
req = json.loads(line)
print(json.dumps({"id": req["id"], "objective": 7.0, "constraints": []}), flush=True)
"""


def test_external_respawns_after_child_death(tmp_path):
    cmd = evaluator_command(tmp_path, ONE_SHOT_EVALUATOR)
    with ExternalEvaluatorClient(cmd, n_constraints=0, timeout_secs=10) as client:
        first = client.evaluate([0.1], LOW)
        assert first.ok and first.objective == 7.0
        # wait for the child to finish exiting, then the next call
        # must spawn a fresh one
        deadline = time.monotonic() + 5
        while client._proc.poll() is None and time.monotonic() < deadline:
            time.sleep(0.01)
        second = client.evaluate([0.2], HIGH)
        assert second.ok and second.objective == 7.0


def test_external_malformed_response(tmp_path):
    source = "import sys\nfor line in sys.stdin:\n    print('garbage not json', flush=True)\n"
    cmd = evaluator_command(tmp_path, source)
    with ExternalEvaluatorClient(cmd, n_constraints=0, timeout_secs=5) as client:
        rec = client.evaluate([0.1], LOW)
        assert rec.status is EvalStatus.FAILED
        assert rec.error.startswith("MalformedResponse")


def test_external_mismatched_id(tmp_path):
    source = """\
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"id": req["id"] + 100, "objective": 0.0,
                      "constraints": []}), flush=True)
"""
    cmd = evaluator_command(tmp_path, source)
    with ExternalEvaluatorClient(cmd, n_constraints=0, timeout_secs=5) as client:
        rec = client.evaluate([0.1], LOW)
        assert rec.status is EvalStatus.FAILED
        assert rec.error.startswith("MalformedResponse")
        assert "id" in rec.error


def test_external_error_response(tmp_path):
    source = """\
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"id": req["id"], "error": "convergence failure"}), flush=True)
"""
    cmd = evaluator_command(tmp_path, source)
    with ExternalEvaluatorClient(cmd, n_constraints=0, timeout_secs=5) as client:
        rec = client.evaluate([0.1], LOW)
        assert rec.status is EvalStatus.FAILED
        assert rec.error.startswith("EvaluatorError")
        assert "convergence failure" in rec.error


def test_external_wrong_constraint_count(tmp_path):
    cmd = evaluator_command(tmp_path, ECHO_EVALUATOR)  # always 1 constraint
    with ExternalEvaluatorClient(cmd, n_constraints=3, timeout_secs=5) as client:
        rec = client.evaluate([0.1, 0.2], LOW)
        assert rec.status is EvalStatus.FAILED
        assert rec.error.startswith("MalformedResponse")


def test_external_nonfinite_objective(tmp_path):
    source = """\
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print('{"id": %d, "objective": Infinity, "constraints": []}' % req["id"], flush=True)
"""
    cmd = evaluator_command(tmp_path, source)
    with ExternalEvaluatorClient(cmd, n_constraints=0, timeout_secs=5) as client:
        rec = client.evaluate([0.1], LOW)
        assert rec.status is EvalStatus.FAILED
        assert "non-finite" in rec.error


def test_external_close_ends_child(tmp_path):
    cmd = evaluator_command(tmp_path, ECHO_EVALUATOR)
    client = ExternalEvaluatorClient(cmd, n_constraints=1, timeout_secs=10)
    assert client.evaluate([0.1, 0.2], LOW).ok
    client.close()
    assert client._proc is None
    client.close()  # idempotent


# ---------------------------------------------------------------- wrapper

def test_make_problem_builtin():
    with make_problem("constrained2d") as prob:
        rec = prob.evaluate([0.3, 0.7], HIGH)
        direct = builtin_constrained2d([0.3, 0.7], HIGH)
        assert rec.objective == direct.objective
        assert rec.constraints == direct.constraints


def test_make_problem_external(tmp_path):
    cmd = evaluator_command(tmp_path, ECHO_EVALUATOR)
    spec = ProblemSpec("echo", 2, Bounds(np.zeros(2), np.ones(2)), 1,
                       "external", cmd, 4.0)
    with make_problem(spec, timeout_secs=10) as prob:
        rec = prob.evaluate([0.5, 0.25], HIGH)
        assert rec.ok
        assert rec.objective == pytest.approx(1.5, abs=1e-15)
