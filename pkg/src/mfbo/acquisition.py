"""Closed-form acquisition functions.

Expected improvement, probability of feasibility, their weighted
product, and the positive-part constraint score used to hunt for a
first feasible point.  All values are computed on the original
objective/constraint scale; array-valued cores back the scalar
operations so candidate batches can be scored in one shot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import erfc

from mfbo.gp import ContractViolation, PosteriorGaussian

# Below this sigma the Gaussian is treated as a point mass.
SIGMA_FLOOR = 1e-12

# Below this lambda the direct EI formula cancels catastrophically and
# the asymptotic tail expansion takes over.
_EI_TAIL_LAMBDA = -8.0

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Incumbent:
    """Best feasible observed objective (original units) at one fidelity.

    ``x`` keeps the location of the incumbent in normalized coordinates
    for candidate anchoring; it is None when ``exists`` is False.
    """

    tau: float
    x: Optional[np.ndarray]
    exists: bool

    @classmethod
    def none(cls) -> "Incumbent":
        return cls(math.nan, None, False)


@dataclass(frozen=True)
class PosteriorSet:
    """Objective and constraint posteriors at one design point."""

    objective: PosteriorGaussian
    constraints: List[PosteriorGaussian]


def normal_cdf(z: np.ndarray) -> np.ndarray:
    """Standard normal CDF through erfc, stable in both tails."""
    return 0.5 * erfc(-np.asarray(z, dtype=float) * _INV_SQRT2)


def normal_pdf(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def ei_values(mu: np.ndarray, sigma: np.ndarray, tau: float) -> np.ndarray:
    """Vectorized expected improvement for minimization.

    EI = sigma * (lam * Phi(lam) + phi(lam)) with lam = (tau - mu) / sigma.
    Point-mass posteriors (sigma < 1e-12) fall back to max(0, tau - mu);
    deep-tail lambdas use the asymptotic expansion of the Mills ratio to
    dodge catastrophic cancellation.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    out = np.empty_like(mu)
    degenerate = sigma < SIGMA_FLOOR
    out[degenerate] = np.maximum(0.0, tau - mu[degenerate])
    ok = ~degenerate
    if np.any(ok):
        lam = (tau - mu[ok]) / sigma[ok]
        phi = normal_pdf(lam)
        direct = lam * normal_cdf(lam) + phi
        tail = lam < _EI_TAIL_LAMBDA
        if np.any(tail):
            lt = lam[tail]
            inv2 = 1.0 / (lt * lt)
            # lam*Phi(lam) + phi(lam) ~ phi(lam) (1/lam^2 - 3/lam^4 + 15/lam^6)
            direct[tail] = phi[tail] * inv2 * (1.0 - 3.0 * inv2 + 15.0 * inv2 * inv2)
        out[ok] = sigma[ok] * direct
    return np.maximum(out, 0.0)


def pf_values(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Vectorized probability that a constraint (c < 0 feasible) holds.

    PF = Phi(-mu / sigma), with the point-mass limits 1 / 0 / 0.5 for
    mu < 0 / mu > 0 / mu == 0.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    out = np.empty_like(mu)
    degenerate = sigma < SIGMA_FLOOR
    out[degenerate] = np.where(mu[degenerate] < 0.0, 1.0,
                               np.where(mu[degenerate] > 0.0, 0.0, 0.5))
    ok = ~degenerate
    if np.any(ok):
        out[ok] = normal_cdf(-mu[ok] / sigma[ok])
    return out


def expected_improvement(post: PosteriorGaussian, inc: Incumbent) -> float:
    """Expected improvement of ``post`` over the incumbent (minimization)."""
    if not inc.exists:
        raise ContractViolation("expected_improvement needs an existing incumbent; "
                                "use first_feasible_score before one is found")
    if post.variance < 0:
        raise ContractViolation("posterior variance must be nonnegative")
    return float(ei_values(np.array([post.mean]), np.array([post.sigma]), inc.tau)[0])


def probability_of_feasibility(post: PosteriorGaussian) -> float:
    """Probability that the constraint value is negative under ``post``."""
    if post.variance < 0:
        raise ContractViolation("posterior variance must be nonnegative")
    return float(pf_values(np.array([post.mean]), np.array([post.sigma]))[0])


def weighted_ei(ps: PosteriorSet, inc: Incumbent) -> float:
    """Expected improvement times the probability of each constraint holding.

    Equals plain EI exactly when there are no constraints.
    """
    value = expected_improvement(ps.objective, inc)
    for c in ps.constraints:
        value *= probability_of_feasibility(c)
    return value


def first_feasible_score(ps: PosteriorSet) -> float:
    """Sum of positive-part constraint means; zero iff all means feasible.

    Minimized (instead of maximizing wEI) while no feasible point has
    been observed at the target fidelity.
    """
    if len(ps.constraints) < 1:
        raise ContractViolation("first_feasible_score needs at least one constraint")
    return float(sum(max(0.0, c.mean) for c in ps.constraints))
