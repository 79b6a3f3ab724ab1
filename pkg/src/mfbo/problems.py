"""Problem definitions.

Built-in synthetic two-fidelity benchmarks with known optima, plus a
line-delimited JSON subprocess client for external evaluators (real
simulators).  Users plugging in an external evaluator must supply
their own low/high fidelity pair; what "low fidelity" means (shorter
transient, single corner, coarser mesh...) is domain knowledge the
toolkit cannot guess.
"""

from __future__ import annotations

import json
import math
import queue
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from mfbo.gp import ContractViolation
from mfbo.fusion import FidelityLevel

SQRT2 = math.sqrt(2.0)


class EvalStatus(Enum):
    OK = "ok"
    FAILED = "failed"


@dataclass(frozen=True)
class Bounds:
    """Per-coordinate box bounds in original units."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ContractViolation("bounds must be two equal-length vectors")
        if not np.all(lo < hi):
            raise ContractViolation("each lower bound must be strictly below its upper bound")

    @classmethod
    def from_pairs(cls, pairs) -> "Bounds":
        arr = np.asarray(pairs, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ContractViolation("bounds pairs must be a (d, 2) array")
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def pairs(self):
        return [(float(lo), float(hi)) for lo, hi in zip(self.lower, self.upper)]

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


@dataclass(frozen=True)
class ProblemSpec:
    """Static description of an optimization problem."""

    name: str
    dimension: int
    bounds: Bounds
    n_constraints: int
    evaluator_kind: str  # "builtin" or "external"
    evaluator_target: str  # builtin name or external command line
    cost_ratio: float

    def __post_init__(self):
        if self.dimension != self.bounds.dim:
            raise ContractViolation("dimension does not match bounds")
        if self.n_constraints < 0:
            raise ContractViolation("n_constraints must be >= 0")
        if self.cost_ratio <= 0:
            raise ContractViolation("cost_ratio must be positive")
        if self.evaluator_kind not in ("builtin", "external"):
            raise ContractViolation(f"unknown evaluator kind {self.evaluator_kind!r}")


@dataclass(frozen=True)
class EvaluationRecord:
    """One evaluator call: inputs in original units, outcome, timing."""

    x: np.ndarray
    fidelity: FidelityLevel
    objective: float
    constraints: Tuple[float, ...]
    wall_time: float
    status: EvalStatus
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status is EvalStatus.OK

    def feasible(self) -> bool:
        return self.ok and all(c < 0.0 for c in self.constraints)


def _record(x, fidelity, objective, constraints, started) -> EvaluationRecord:
    return EvaluationRecord(
        x=np.asarray(x, dtype=float),
        fidelity=fidelity,
        objective=float(objective),
        constraints=tuple(float(c) for c in constraints),
        wall_time=time.monotonic() - started,
        status=EvalStatus.OK,
    )


def _check_point(x, bounds: Bounds) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (bounds.dim,):
        raise ContractViolation(f"point shape {x.shape} != ({bounds.dim},)")
    if not bounds.contains(x):
        raise ContractViolation(f"point {x} outside bounds")
    return x


def _forrester_low(x):
    return np.sin(8 * np.pi * x)


def _forrester_high(x):
    return (x - SQRT2) * np.sin(8 * np.pi * x) ** 2


def builtin_forrester_nl(x, fidelity: FidelityLevel) -> EvaluationRecord:
    """1-d unconstrained pair: LOW sin(8 pi x), HIGH (x - sqrt 2) sin^2(8 pi x).

    The high function is a nonlinear transform of the low one, so no
    affine correction can align them; that is the point of this
    benchmark.
    """
    started = time.monotonic()
    x = _check_point(x, _FORRESTER_BOUNDS)
    fn = _forrester_high if fidelity is FidelityLevel.HIGH else _forrester_low
    return _record(x, fidelity, fn(x[0]), (), started)


def _constrained2d_high(x1, x2):
    f = (x1 - 0.3) ** 2 + (x2 - 0.7) ** 2
    c = 0.25 - x1 - x2
    return f, c


def _constrained2d_low(x1, x2):
    # Smooth nonlinear distortion of the high-fidelity surface; biased
    # but rank-preserving so the low model stays informative.
    f_h, c_h = _constrained2d_high(x1, x2)
    f = 0.8 * f_h + 0.3 * np.sin(3 * x1) * np.cos(2 * x2)
    c = c_h + 0.05 * np.sin(5 * x1)
    return f, c


def builtin_constrained2d(x, fidelity: FidelityLevel) -> EvaluationRecord:
    """2-d bowl with one linear constraint; optimum (0.3, 0.7), f* = 0."""
    started = time.monotonic()
    x = _check_point(x, _UNIT2_BOUNDS)
    fn = _constrained2d_high if fidelity is FidelityLevel.HIGH else _constrained2d_low
    f, c = fn(x[0], x[1])
    return _record(x, fidelity, f, (c,), started)


def _constrained2d_tight_high(x1, x2):
    f = (x1 - 0.3) ** 2 + (x2 - 0.7) ** 2
    c = 1.4 - x1 - x2  # feasible corner triangle, ~18% of the box
    return f, c


def _constrained2d_tight_low(x1, x2):
    f_h, c_h = _constrained2d_tight_high(x1, x2)
    f = 0.8 * f_h + 0.3 * np.sin(3 * x1) * np.cos(2 * x2)
    c = c_h + 0.05 * np.sin(5 * x1)
    return f, c


def builtin_constrained2d_tight(x, fidelity: FidelityLevel) -> EvaluationRecord:
    """Shrunken-feasible-region variant of the 2-d benchmark.

    The unconstrained minimizer (0.3, 0.7) is infeasible; the constrained
    optimum sits on the boundary at (0.5, 0.9) with f* = 0.08.
    """
    started = time.monotonic()
    x = _check_point(x, _UNIT2_BOUNDS)
    fn = _constrained2d_tight_high if fidelity is FidelityLevel.HIGH else _constrained2d_tight_low
    f, c = fn(x[0], x[1])
    return _record(x, fidelity, f, (c,), started)


_FORRESTER_BOUNDS = Bounds(np.array([0.0]), np.array([1.0]))
_UNIT2_BOUNDS = Bounds(np.zeros(2), np.ones(2))

_BUILTIN_FUNCS: Dict[str, Callable] = {
    "forrester-nl": builtin_forrester_nl,
    "constrained2d": builtin_constrained2d,
    "constrained2d-tight": builtin_constrained2d_tight,
}

_BUILTIN_SPECS: Dict[str, ProblemSpec] = {
    "forrester-nl": ProblemSpec("forrester-nl", 1, _FORRESTER_BOUNDS, 0,
                                "builtin", "forrester-nl", 5.0),
    "constrained2d": ProblemSpec("constrained2d", 2, _UNIT2_BOUNDS, 1,
                                 "builtin", "constrained2d", 20.0),
    "constrained2d-tight": ProblemSpec("constrained2d-tight", 2, _UNIT2_BOUNDS, 1,
                                       "builtin", "constrained2d-tight", 20.0),
}

# Vectorized high-fidelity forms for the grid oracles.
_GRID_FORMS = {
    "constrained2d": _constrained2d_high,
    "constrained2d-tight": _constrained2d_tight_high,
}


def builtin_names():
    return sorted(_BUILTIN_SPECS)


def builtin_spec(name: str) -> ProblemSpec:
    try:
        return _BUILTIN_SPECS[name]
    except KeyError:
        raise ContractViolation(
            f"unknown builtin problem {name!r}; available: {', '.join(builtin_names())}")


@dataclass(frozen=True)
class OracleInfo:
    """Dense-grid reference for a builtin problem's high fidelity.

    ``f_scale`` is the standard deviation of the objective over the
    feasible grid; "within p% of the optimum" targets are expressed as
    f_star + p * f_scale so they stay meaningful when f_star is ~0.
    """

    f_star: float
    x_star: np.ndarray
    f_scale: float
    n_grid: int


def grid_oracle(name: str, n: int = 512) -> OracleInfo:
    """Brute-force reference optimum over an n-per-axis grid."""
    spec = builtin_spec(name)
    if spec.dimension == 1:
        xs = np.linspace(spec.bounds.lower[0], spec.bounds.upper[0], n)
        f = _forrester_high(xs)
        i = int(np.argmin(f))
        return OracleInfo(float(f[i]), np.array([xs[i]]), float(f.std()), n)
    form = _GRID_FORMS[name]
    g1 = np.linspace(spec.bounds.lower[0], spec.bounds.upper[0], n)
    g2 = np.linspace(spec.bounds.lower[1], spec.bounds.upper[1], n)
    X1, X2 = np.meshgrid(g1, g2, indexing="ij")
    f, c = form(X1, X2)
    feasible = c < 0.0
    if not np.any(feasible):
        raise ContractViolation(f"no feasible grid point for {name}")
    ff = np.where(feasible, f, np.inf)
    flat = int(np.argmin(ff))
    i, j = np.unravel_index(flat, ff.shape)
    return OracleInfo(float(f[i, j]), np.array([g1[i], g2[j]]),
                      float(f[feasible].std()), n)


def _failed(x, fidelity, n_constraints, started, error) -> EvaluationRecord:
    return EvaluationRecord(
        x=np.asarray(x, dtype=float),
        fidelity=fidelity,
        objective=math.nan,
        constraints=tuple([math.nan] * n_constraints),
        wall_time=time.monotonic() - started,
        status=EvalStatus.FAILED,
        error=error,
    )


class ExternalEvaluatorClient:
    """Client for the line-delimited JSON evaluator protocol.

    One child process, one in-flight request at a time.  Requests are
    ``{"id": n, "fidelity": "low"|"high", "x": [...]}`` and the child
    must answer each line, in order, with either
    ``{"id": n, "objective": f, "constraints": [...]}`` or
    ``{"id": n, "error": "message"}``.  Closing our end of stdin tells
    the child to exit.  A timed-out child is killed and respawned on
    the next call (its protocol state is unrecoverable).
    """

    def __init__(self, command: str, n_constraints: int, timeout_secs: float = 30.0):
        if timeout_secs <= 0:
            raise ContractViolation("timeout_secs must be positive")
        self._command = command
        self._n_constraints = n_constraints
        self._timeout = timeout_secs
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._eof = threading.Event()
        self._next_id = 0

    def _spawn(self):
        self._proc = subprocess.Popen(
            shlex.split(self._command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        # Fresh queue and EOF flag per child, bound into the reader
        # thread, so a straggling line from a dead child can never leak
        # into its replacement's stream.
        self._lines = queue.Queue()
        self._eof = threading.Event()
        t = threading.Thread(target=self._read_loop,
                             args=(self._proc, self._lines, self._eof),
                             daemon=True)
        t.start()

    @staticmethod
    def _read_loop(proc, lines, eof):
        assert proc.stdout is not None
        for line in proc.stdout:
            lines.put(line)
        eof.set()
        lines.put(None)  # EOF sentinel

    def _kill(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()
        self._proc = None

    def evaluate(self, x, fidelity: FidelityLevel) -> EvaluationRecord:
        started = time.monotonic()
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self._proc is None or self._proc.poll() is not None or self._eof.is_set():
            self._kill()
            try:
                self._spawn()
            except OSError as exc:
                return _failed(x, fidelity, self._n_constraints, started,
                               f"ChildExit: failed to launch evaluator: {exc}")
        req_id = self._next_id
        self._next_id += 1
        request = json.dumps({"id": req_id, "fidelity": fidelity.value, "x": x.tolist()})
        try:
            assert self._proc.stdin is not None
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            code = self._proc.poll()
            self._kill()
            return _failed(x, fidelity, self._n_constraints, started,
                           f"ChildExit: evaluator closed its input (exit code {code})")
        try:
            line = self._lines.get(timeout=self._timeout)
        except queue.Empty:
            self._kill()
            return _failed(x, fidelity, self._n_constraints, started,
                           f"Timeout: no response within {self._timeout}s")
        if line is None:
            code = self._proc.poll()
            self._kill()
            return _failed(x, fidelity, self._n_constraints, started,
                           f"ChildExit: evaluator exited (code {code}) before responding")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError:
            return _failed(x, fidelity, self._n_constraints, started,
                           f"MalformedResponse: not valid JSON: {line.strip()[:200]!r}")
        if not isinstance(resp, dict) or resp.get("id") != req_id:
            return _failed(x, fidelity, self._n_constraints, started,
                           f"MalformedResponse: bad or mismatched id (expected {req_id})")
        if "error" in resp:
            return _failed(x, fidelity, self._n_constraints, started,
                           f"EvaluatorError: {resp['error']}")
        try:
            objective = float(resp["objective"])
            constraints = [float(c) for c in resp.get("constraints", [])]
        except (KeyError, TypeError, ValueError):
            return _failed(x, fidelity, self._n_constraints, started,
                           "MalformedResponse: missing or non-numeric fields")
        if len(constraints) != self._n_constraints:
            return _failed(x, fidelity, self._n_constraints, started,
                           f"MalformedResponse: expected {self._n_constraints} constraints, "
                           f"got {len(constraints)}")
        if not (math.isfinite(objective) and all(math.isfinite(c) for c in constraints)):
            return _failed(x, fidelity, self._n_constraints, started,
                           "MalformedResponse: non-finite values")
        return _record(x, fidelity, objective, constraints, started)

    def close(self):
        """Signal termination by closing the child's stdin, then reap it."""
        if self._proc is None:
            return
        try:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            self._kill()
        finally:
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Problem:
    """A ProblemSpec plus the machinery to actually evaluate it."""

    def __init__(self, spec: ProblemSpec, timeout_secs: float = 30.0):
        self.spec = spec
        self._client: Optional[ExternalEvaluatorClient] = None
        if spec.evaluator_kind == "builtin":
            self._fn = _BUILTIN_FUNCS[spec.evaluator_target]
        else:
            self._client = ExternalEvaluatorClient(
                spec.evaluator_target, spec.n_constraints, timeout_secs)

    def evaluate(self, x, fidelity: FidelityLevel) -> EvaluationRecord:
        if self._client is not None:
            return self._client.evaluate(x, fidelity)
        return self._fn(x, fidelity)

    def close(self):
        if self._client is not None:
            self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_problem(name_or_spec, timeout_secs: float = 30.0) -> Problem:
    """Build a runnable Problem from a builtin name or a ProblemSpec."""
    spec = builtin_spec(name_or_spec) if isinstance(name_or_spec, str) else name_or_spec
    return Problem(spec, timeout_secs=timeout_secs)
