"""Constrained multi-fidelity optimization loop.

Each iteration fits low-fidelity surrogates and fused two-fidelity
surrogates for the objective and every constraint, maximizes a
feasibility-weighted improvement acquisition over anchored candidate
sets, routes the chosen point to the cheap or expensive evaluator based
on the low models' predictive uncertainty, and updates the datasets.
While no feasible point is known at a level, acquisition switches to a
constraint-violation score that hunts for a first feasible point.

All internal coordinates live in the unit box; evaluator calls convert
back to original units.  State is serializable so interrupted runs can
resume bit-for-bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from mfbo.acquisition import Incumbent, ei_values, pf_values
from mfbo.fusion import (
    FidelityLevel,
    McConfig,
    MfHyperparameters,
    MfModel,
    fit_mf,
    make_mf_model,
    predict_mf_batch,
)
from mfbo.gp import (
    ContractViolation,
    FitConfig,
    FitFailed,
    GpModel,
    Hyperparameters,
    TrainingSet,
    fit,
    make_model,
    predict_batch,
)
from mfbo.problems import EvalStatus, EvaluationRecord, Problem


class AcquisitionMode(Enum):
    WEI = "wei"
    FIRST_FEASIBLE = "first_feasible"


@dataclass(frozen=True)
class MspConfig:
    """Candidate-set shape for acquisition maximization."""

    n_candidates: int = 100
    frac_around_tau_l: float = 0.10
    frac_around_tau_h: float = 0.40
    anchor_radius: float = 0.05
    n_local_starts: int = 10
    local_iteration_cap: int = 50

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ContractViolation("n_candidates must be positive")
        for name in ("frac_around_tau_l", "frac_around_tau_h"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"{name} must be in [0, 1]")
        if self.frac_around_tau_l + self.frac_around_tau_h > 1.0 + 1e-12:
            raise ContractViolation("anchored fractions must sum to at most 1")
        if self.anchor_radius < 0:
            raise ContractViolation("anchor_radius must be >= 0")
        if self.n_local_starts < 1 or self.local_iteration_cap < 1:
            raise ContractViolation("local search parameters must be positive")


@dataclass(frozen=True)
class FidelityConfig:
    """Budget and fidelity-routing knobs."""

    total_budget_equiv: float
    gamma: float = 0.01
    cost_ratio: Optional[float] = None  # None: use the problem's own ratio
    high_budget: int = 1_000_000

    def __post_init__(self):
        if self.total_budget_equiv < 0:
            raise ContractViolation("total_budget_equiv must be >= 0")
        if self.gamma <= 0:
            raise ContractViolation("gamma must be positive")
        if self.cost_ratio is not None and self.cost_ratio <= 0:
            raise ContractViolation("cost_ratio must be positive")
        if self.high_budget < 1:
            raise ContractViolation("high_budget must be a positive integer")


@dataclass(frozen=True)
class OptimizerConfig:
    """Everything a run needs besides the problem itself."""

    fidelity: FidelityConfig
    msp: MspConfig = field(default_factory=MspConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    mc: McConfig = field(default_factory=McConfig)
    n_init_low: int = 20
    n_init_high: int = 5
    seed: int = 0
    init_design: str = "uniform"  # or "lhs"
    init_box: Optional[Tuple[Tuple[float, float], ...]] = None  # unit coords
    single_fidelity: bool = False
    max_failures: int = 20
    max_iterations: Optional[int] = None  # per-session step cap, not part of the result

    def __post_init__(self):
        if self.init_design not in ("uniform", "lhs"):
            raise ContractViolation("init_design must be 'uniform' or 'lhs'")
        if self.n_init_high < 1:
            raise ContractViolation("n_init_high must be >= 1")
        if self.single_fidelity:
            if self.n_init_low != 0:
                raise ContractViolation("single_fidelity runs take n_init_low = 0")
        elif self.n_init_low < 1:
            raise ContractViolation("n_init_low must be >= 1")
        if self.max_failures < 1:
            raise ContractViolation("max_failures must be >= 1")
        if self.init_box is not None:
            for lo, hi in self.init_box:
                if not (0.0 <= lo < hi <= 1.0):
                    raise ContractViolation("init_box must be within the unit box")


class FidelityDataset:
    """Observations at one fidelity, in unit-box coordinates."""

    def __init__(self, x: np.ndarray, objective: np.ndarray, constraints: np.ndarray):
        self.x = np.asarray(x, dtype=float)
        self.objective = np.asarray(objective, dtype=float)
        self.constraints = np.asarray(constraints, dtype=float)

    @classmethod
    def empty(cls, dim: int, n_constraints: int) -> "FidelityDataset":
        return cls(np.empty((0, dim)), np.empty(0), np.empty((0, n_constraints)))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def appended(self, x: np.ndarray, objective: float,
                 constraints: Sequence[float]) -> "FidelityDataset":
        return FidelityDataset(
            np.vstack([self.x, np.asarray(x, dtype=float)[None, :]]),
            np.append(self.objective, objective),
            np.vstack([self.constraints,
                       np.asarray(constraints, dtype=float)[None, :]]),
        )

    def to_payload(self) -> dict:
        return {
            "x": self.x.tolist(),
            "objective": self.objective.tolist(),
            "constraints": self.constraints.tolist(),
        }

    @classmethod
    def from_payload(cls, payload: dict, dim: int, n_constraints: int) -> "FidelityDataset":
        obj = np.asarray(payload["objective"], dtype=float)
        n = obj.shape[0]
        x = np.asarray(payload["x"], dtype=float).reshape(n, dim)
        cons = np.asarray(payload["constraints"], dtype=float).reshape(n, n_constraints)
        return cls(x, obj, cons)


def compute_incumbent(ds: FidelityDataset) -> Incumbent:
    """Best feasible observation; ties break to the earliest row."""
    if ds.n == 0:
        return Incumbent.none()
    if ds.constraints.shape[1] > 0:
        feasible = np.all(ds.constraints < 0.0, axis=1)
    else:
        feasible = np.ones(ds.n, dtype=bool)
    if not feasible.any():
        return Incumbent.none()
    masked = np.where(feasible, ds.objective, np.inf)
    i = int(np.argmin(masked))
    return Incumbent(tau=float(ds.objective[i]), x=ds.x[i].copy(), exists=True)


@dataclass
class RunState:
    """Everything needed to continue a run deterministically."""

    data_low: FidelityDataset
    data_high: FidelityDataset
    iteration: int
    spent_equiv: float
    rng_state: dict
    consecutive_failures: int = 0
    events_written: int = 0

    @property
    def incumbent_low(self) -> Incumbent:
        return compute_incumbent(self.data_low)

    @property
    def incumbent_high(self) -> Incumbent:
        return compute_incumbent(self.data_high)

    def to_payload(self) -> dict:
        inc_l, inc_h = self.incumbent_low, self.incumbent_high
        return {
            "data_low": self.data_low.to_payload(),
            "data_high": self.data_high.to_payload(),
            "iteration": self.iteration,
            "spent_equiv": self.spent_equiv,
            "rng_state": self.rng_state,
            "consecutive_failures": self.consecutive_failures,
            "events_written": self.events_written,
            "incumbent_low": _incumbent_payload(inc_l),
            "incumbent_high": _incumbent_payload(inc_h),
        }

    @classmethod
    def from_payload(cls, payload: dict, dim: int, n_constraints: int) -> "RunState":
        state = cls(
            data_low=FidelityDataset.from_payload(payload["data_low"], dim, n_constraints),
            data_high=FidelityDataset.from_payload(payload["data_high"], dim, n_constraints),
            iteration=int(payload["iteration"]),
            spent_equiv=float(payload["spent_equiv"]),
            rng_state=payload["rng_state"],
            consecutive_failures=int(payload.get("consecutive_failures", 0)),
            events_written=int(payload.get("events_written", 0)),
        )
        for key, actual in (("incumbent_low", state.incumbent_low),
                            ("incumbent_high", state.incumbent_high)):
            stored = payload.get(key)
            if stored is None:
                continue
            if stored.get("exists", False) != actual.exists:
                raise ContractViolation(f"{key} in payload disagrees with its dataset")
            if actual.exists and stored["tau"] != actual.tau:
                raise ContractViolation(f"{key} in payload disagrees with its dataset")
        return state


def _incumbent_payload(inc: Incumbent) -> Optional[dict]:
    if not inc.exists:
        return {"exists": False}
    return {"exists": True, "tau": inc.tau, "x": inc.x.tolist()}


def latin_hypercube(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """One stratified sample per axis-aligned slice, shuffled per axis."""
    strata = np.tile(np.arange(n), (dim, 1))
    perms = rng.permuted(strata, axis=1).T
    return (perms + rng.uniform(size=(n, dim))) / n


def propose_candidates(inc_high: Incumbent, inc_low: Incumbent, dim: int,
                       msp: MspConfig, rng: np.random.Generator):
    """Anchored-plus-uniform candidate set in the unit box.

    A fixed fraction of candidates is drawn around each existing
    incumbent (Gaussian perturbation, clipped); a missing incumbent's
    share reverts to uniform sampling.  Returns (candidates, counts).
    """
    n = msp.n_candidates
    n_h = int(math.floor(n * msp.frac_around_tau_h)) if inc_high.exists else 0
    n_l = int(math.floor(n * msp.frac_around_tau_l)) if inc_low.exists else 0
    n_u = n - n_h - n_l
    parts = []
    if n_h:
        parts.append(np.clip(
            inc_high.x[None, :] + msp.anchor_radius * rng.standard_normal((n_h, dim)),
            0.0, 1.0))
    if n_l:
        parts.append(np.clip(
            inc_low.x[None, :] + msp.anchor_radius * rng.standard_normal((n_l, dim)),
            0.0, 1.0))
    if n_u:
        parts.append(rng.uniform(size=(n_u, dim)))
    candidates = np.vstack(parts)
    counts = {"anchored_high": n_h, "anchored_low": n_l, "uniform": n_u}
    return candidates, counts


@dataclass(frozen=True)
class AcquisitionOutcome:
    x: np.ndarray
    score: float  # wEI in WEI mode, negated violation score in FIRST_FEASIBLE
    mode: AcquisitionMode
    flat_fallback: bool
    counts: dict


def maximize_acquisition(score_batch: Callable[[np.ndarray], np.ndarray],
                         variance_batch: Callable[[np.ndarray], np.ndarray],
                         candidates: np.ndarray, counts: dict, msp: MspConfig,
                         mode: AcquisitionMode,
                         extra_starts: Sequence[np.ndarray] = ()) -> AcquisitionOutcome:
    """Score candidates, refine the best locally, return the best point.

    ``score_batch`` maps an (n, d) array to n scores, higher better
    (FIRST_FEASIBLE callers pass the negated violation score).  A
    completely flat, all-zero improvement surface falls back to the
    maximum-posterior-variance candidate so the step still explores.
    """
    dim = candidates.shape[1]
    values = np.asarray(score_batch(candidates), dtype=float)
    if mode is AcquisitionMode.WEI and values.max() <= 0.0:
        variances = np.asarray(variance_batch(candidates), dtype=float)
        i = int(np.argmax(variances))
        return AcquisitionOutcome(candidates[i].copy(), 0.0, mode, True, counts)

    order = np.argsort(-values, kind="stable")[:msp.n_local_starts]
    starts = [candidates[i] for i in order] + [np.asarray(s, dtype=float)
                                               for s in extra_starts]
    best_x = candidates[order[0]].copy()
    best_v = float(values[order[0]])
    bounds = [(0.0, 1.0)] * dim

    def negated(z):
        return -float(score_batch(z[None, :])[0])

    for x0 in starts:
        res = optimize.minimize(negated, np.clip(x0, 0.0, 1.0),
                                method="Nelder-Mead", bounds=bounds,
                                options={"maxiter": msp.local_iteration_cap,
                                         "xatol": 1e-4, "fatol": 1e-12})
        if -res.fun > best_v:
            best_v = -float(res.fun)
            best_x = np.clip(res.x, 0.0, 1.0)
    return AcquisitionOutcome(best_x, best_v, mode, False, counts)


@dataclass(frozen=True)
class FidelitySelection:
    level: FidelityLevel
    variances_std: Tuple[float, ...]
    variances_raw: Tuple[float, ...]
    threshold: float
    criterion_met: bool
    budget_forced: bool

    def to_payload(self) -> dict:
        return {
            "level": self.level.value,
            "variances_std": list(self.variances_std),
            "variances_raw": list(self.variances_raw),
            "threshold": self.threshold,
            "criterion_met": self.criterion_met,
            "budget_forced": self.budget_forced,
        }


def fidelity_decision(variances_std: Sequence[float], gamma: float):
    """Low-uncertainty test: every standardized variance below m * gamma.

    ``variances_std`` holds one entry per modelled output (objective
    plus each constraint), so its length is 1 + N_c and the threshold
    scales with it.  Returns (criterion_met, threshold).
    """
    threshold = len(variances_std) * gamma
    return bool(max(variances_std) < threshold), threshold


def select_fidelity(x: np.ndarray, low_models: Sequence[GpModel],
                    fc: FidelityConfig, n_high: int) -> FidelitySelection:
    """Route to HIGH only where the cheap models already agree tightly.

    Uses standardized (scale-free) predictive variances; raw variances
    are recorded alongside for audit.  A spent high-evaluation budget
    forces LOW regardless of the criterion.
    """
    x = np.asarray(x, dtype=float)
    v_std, v_raw = [], []
    for m in low_models:
        _, variance, _, variance_std = predict_batch(m, x[None, :])
        v_std.append(float(variance_std[0]))
        v_raw.append(float(variance[0]))
    met, threshold = fidelity_decision(v_std, fc.gamma)
    budget_forced = n_high >= fc.high_budget
    level = FidelityLevel.HIGH if met and not budget_forced else FidelityLevel.LOW
    return FidelitySelection(level, tuple(v_std), tuple(v_raw), threshold,
                             met, budget_forced)


# ------------------------------------------------------------------ run loop

def _cost_ratio(problem: Problem, fc: FidelityConfig) -> float:
    return fc.cost_ratio if fc.cost_ratio is not None else problem.spec.cost_ratio


def _eval_cost(fidelity: FidelityLevel, ratio: float) -> float:
    return 1.0 if fidelity is FidelityLevel.HIGH else 1.0 / ratio


def _fit_gp_stack(ds: FidelityDataset, cfg: FitConfig, label: str,
                  fit_failures: List[str]) -> List[GpModel]:
    """One GP per output (objective first, then each constraint)."""
    targets = [ds.objective] + [ds.constraints[:, j]
                                for j in range(ds.constraints.shape[1])]
    names = ["objective"] + [f"constraint{j}"
                             for j in range(ds.constraints.shape[1])]
    models = []
    for name, y in zip(names, targets):
        ts = TrainingSet.from_data(ds.x, y)
        try:
            models.append(fit(ts, cfg))
        except FitFailed:
            fit_failures.append(f"{label}_{name}")
            models.append(make_model(ts, Hyperparameters.default(ds.dim)))
    return models


def _fit_mf_stack(low_models: Sequence[GpModel], ds_high: FidelityDataset,
                  cfg: FitConfig, fit_failures: List[str]) -> List[MfModel]:
    targets = [ds_high.objective] + [ds_high.constraints[:, j]
                                     for j in range(ds_high.constraints.shape[1])]
    names = ["objective"] + [f"constraint{j}"
                             for j in range(ds_high.constraints.shape[1])]
    models = []
    for low, name, y in zip(low_models, names, targets):
        ts = TrainingSet.from_data(ds_high.x, y)
        try:
            models.append(fit_mf(low, ts, cfg))
        except FitFailed:
            fit_failures.append(f"mf_{name}")
            models.append(make_mf_model(low, ts,
                                        MfHyperparameters.default(ds_high.dim)))
    return models


def _gp_stats(models: Sequence[GpModel], X: np.ndarray):
    stats = []
    for m in models:
        mean, variance, _, _ = predict_batch(m, X)
        stats.append((mean, np.sqrt(variance)))
    return stats


def _mf_stats(models: Sequence[MfModel], X: np.ndarray, mc: McConfig):
    stats = []
    for m in models:
        mean, variance, _, _ = predict_mf_batch(m, X, mc)
        stats.append((mean, np.sqrt(variance)))
    return stats


def _wei_from_stats(stats, tau: float) -> np.ndarray:
    mu, sigma = stats[0]
    values = ei_values(mu, sigma, tau)
    for mu_c, sigma_c in stats[1:]:
        values = values * pf_values(mu_c, sigma_c)
    return values


def _violation_from_stats(stats) -> np.ndarray:
    total = np.zeros_like(stats[0][0])
    for mu_c, _ in stats[1:]:
        total = total + np.maximum(mu_c, 0.0)
    return total


def _make_scorers(stats_fn, inc: Incumbent, mode: AcquisitionMode):
    def score_batch(X):
        stats = stats_fn(X)
        if mode is AcquisitionMode.WEI:
            return _wei_from_stats(stats, inc.tau)
        return -_violation_from_stats(stats)

    def variance_batch(X):
        mu, sigma = stats_fn(X)[0]
        return sigma**2

    return score_batch, variance_batch


def _choose_mode(inc: Incumbent, n_constraints: int) -> AcquisitionMode:
    if inc.exists:
        return AcquisitionMode.WEI
    if n_constraints == 0:
        raise ContractViolation("no incumbent without constraints means no data")
    return AcquisitionMode.FIRST_FEASIBLE


def _acq_payload(out: Optional[AcquisitionOutcome], x_unit) -> Optional[dict]:
    if out is None:
        return None
    value = out.score if out.mode is AcquisitionMode.WEI else -out.score
    return {
        "mode": out.mode.value,
        "value": value,
        "flat_fallback": out.flat_fallback,
        "counts": out.counts,
        "x_unit": np.asarray(x_unit, dtype=float).tolist(),
    }


def initialize(problem: Problem, cfg: OptimizerConfig, on_event=None) -> RunState:
    """Sample and evaluate the initial design; returns iteration-0 state."""
    spec = problem.spec
    rng = np.random.default_rng(cfg.seed)
    ratio = _cost_ratio(problem, cfg.fidelity)
    state = RunState(
        data_low=FidelityDataset.empty(spec.dimension, spec.n_constraints),
        data_high=FidelityDataset.empty(spec.dimension, spec.n_constraints),
        iteration=0,
        spent_equiv=0.0,
        rng_state=rng.bit_generator.state,
    )

    def draw(n):
        if cfg.init_design == "lhs":
            u = latin_hypercube(rng, n, spec.dimension)
        else:
            u = rng.uniform(size=(n, spec.dimension))
        if cfg.init_box is not None:
            box = np.asarray(cfg.init_box, dtype=float)
            u = box[:, 0] + u * (box[:, 1] - box[:, 0])
        return u

    plan = []
    if not cfg.single_fidelity:
        plan.extend((u, FidelityLevel.LOW) for u in draw(cfg.n_init_low))
    plan.extend((u, FidelityLevel.HIGH) for u in draw(cfg.n_init_high))

    for u, level in plan:
        rec = problem.evaluate(spec.bounds.from_unit(u), level)
        state = _absorb(state, u, level, rec, ratio, cfg)
        event = {
            "type": "init",
            "fidelity": level.value,
            "x_unit": u.tolist(),
            "x": rec.x.tolist(),
            "status": rec.status.value,
            "error": rec.error,
            "objective": rec.objective if rec.ok else None,
            "constraints": list(rec.constraints) if rec.ok else None,
            "spent_equiv": state.spent_equiv,
        }
        state.events_written += 1
        if on_event is not None:
            on_event(event)
    state.rng_state = rng.bit_generator.state
    return state


def _absorb(state: RunState, x_unit: np.ndarray, level: FidelityLevel,
            rec: EvaluationRecord, ratio: float, cfg: OptimizerConfig) -> RunState:
    """Fold one evaluation into the state; failures cost nothing."""
    if rec.status is EvalStatus.FAILED:
        state.consecutive_failures += 1
        if state.consecutive_failures >= cfg.max_failures:
            raise RuntimeError(
                f"{state.consecutive_failures} consecutive evaluation failures; "
                f"last error: {rec.error}")
        return state
    state.consecutive_failures = 0
    if level is FidelityLevel.HIGH:
        state.data_high = state.data_high.appended(x_unit, rec.objective, rec.constraints)
    else:
        state.data_low = state.data_low.appended(x_unit, rec.objective, rec.constraints)
    state.spent_equiv += _eval_cost(level, ratio)
    return state


def step(problem: Problem, cfg: OptimizerConfig, state: RunState,
         on_event=None) -> RunState:
    """One acquisition-evaluate-update cycle; emits one event."""
    t0 = time.monotonic()
    spec = problem.spec
    dim, n_c = spec.dimension, spec.n_constraints
    ratio = _cost_ratio(problem, cfg.fidelity)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    fit_failures: List[str] = []
    flags: List[str] = []
    acq_low = acq_high = None
    x_low = None
    selection = None

    if cfg.single_fidelity or state.data_low.n == 0:
        if not cfg.single_fidelity:
            flags.append("no_low_data")
        models = _fit_gp_stack(state.data_high, cfg.fit, "high", fit_failures)
        inc_h = compute_incumbent(state.data_high)
        mode = _choose_mode(inc_h, n_c)
        candidates, counts = propose_candidates(inc_h, Incumbent.none(), dim,
                                                cfg.msp, rng)
        score, variance = _make_scorers(lambda X: _gp_stats(models, X), inc_h, mode)
        acq_high = maximize_acquisition(score, variance, candidates, counts,
                                        cfg.msp, mode)
        x_t = acq_high.x
        level = FidelityLevel.HIGH
    else:
        low_models = _fit_gp_stack(state.data_low, cfg.fit, "low", fit_failures)
        inc_l = compute_incumbent(state.data_low)
        inc_h = compute_incumbent(state.data_high)

        mode_l = _choose_mode(inc_l, n_c)
        cands_l, counts_l = propose_candidates(inc_h, inc_l, dim, cfg.msp, rng)
        score_l, var_l = _make_scorers(lambda X: _gp_stats(low_models, X),
                                       inc_l, mode_l)
        acq_low = maximize_acquisition(score_l, var_l, cands_l, counts_l,
                                       cfg.msp, mode_l)
        x_low = acq_low.x

        if state.data_high.n == 0:
            flags.append("no_high_data")
            x_t = x_low
            level = FidelityLevel.HIGH
        else:
            mf_models = _fit_mf_stack(low_models, state.data_high, cfg.fit,
                                      fit_failures)
            mode_h = _choose_mode(inc_h, n_c)
            cands_h, counts_h = propose_candidates(inc_h, inc_l, dim, cfg.msp, rng)
            score_h, var_h = _make_scorers(
                lambda X: _mf_stats(mf_models, X, cfg.mc), inc_h, mode_h)
            acq_high = maximize_acquisition(score_h, var_h, cands_h, counts_h,
                                            cfg.msp, mode_h, extra_starts=(x_low,))
            x_t = acq_high.x
            selection = select_fidelity(x_t, low_models, cfg.fidelity,
                                        state.data_high.n)
            level = selection.level

    rec = problem.evaluate(spec.bounds.from_unit(x_t), level)
    state = _absorb(state, x_t, level, rec, ratio, cfg)
    state.iteration += 1
    state.rng_state = rng.bit_generator.state

    inc_l, inc_h = state.incumbent_low, state.incumbent_high
    event = {
        "type": "iteration",
        "iteration": state.iteration,
        "fidelity": level.value,
        "x_unit": x_t.tolist(),
        "x": rec.x.tolist(),
        "status": rec.status.value,
        "error": rec.error,
        "objective": rec.objective if rec.ok else None,
        "constraints": list(rec.constraints) if rec.ok else None,
        "acq_low": _acq_payload(acq_low, x_low),
        "acq_high": _acq_payload(acq_high, x_t),
        "fidelity_selection": selection.to_payload() if selection else None,
        "fit_failures": fit_failures,
        "flags": flags,
        "spent_equiv": state.spent_equiv,
        "incumbent_low": _incumbent_payload(inc_l),
        "incumbent_high": _incumbent_payload(inc_h),
        "wall_time": time.monotonic() - t0,
    }
    state.events_written += 1
    if on_event is not None:
        on_event(event)
    return state


def run(problem: Problem, cfg: OptimizerConfig, state: Optional[RunState] = None,
        on_event=None) -> RunState:
    """Run (or continue) the loop until the budget or step cap is hit."""
    if state is None:
        state = initialize(problem, cfg, on_event)
    steps = 0
    while state.spent_equiv < cfg.fidelity.total_budget_equiv:
        if cfg.max_iterations is not None and steps >= cfg.max_iterations:
            break
        state = step(problem, cfg, state, on_event)
        steps += 1
    return state
