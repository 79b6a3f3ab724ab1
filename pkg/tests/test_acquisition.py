"""Acquisition function tests: hand values, limits, tail stability, and
a Monte Carlo oracle for expected improvement."""

import math

import numpy as np
import pytest

from mfbo.gp import ContractViolation, PosteriorGaussian
from mfbo.acquisition import (
    Incumbent,
    PosteriorSet,
    ei_values,
    expected_improvement,
    first_feasible_score,
    pf_values,
    probability_of_feasibility,
    weighted_ei,
)


def post(mean, sigma):
    return PosteriorGaussian(mean=mean, variance=sigma**2, variance_std=sigma**2)


def inc(tau):
    return Incumbent(tau=tau, x=None, exists=True)


class TestExpectedImprovement:
    def test_hand_value_at_lambda_zero(self):
        # mu == tau, sigma = 1: EI = phi(0)
        val = expected_improvement(post(0.0, 1.0), inc(0.0))
        assert val == pytest.approx(1.0 / math.sqrt(2 * math.pi), rel=1e-12)
        assert val == pytest.approx(0.398942, abs=1e-6)

    def test_exploitation_limit(self):
        assert expected_improvement(post(-2.0, 1e-15), inc(0.0)) == pytest.approx(2.0)
        assert expected_improvement(post(3.0, 1e-15), inc(0.0)) == 0.0

    def test_vanishing_tail(self):
        val = expected_improvement(post(10.0, 1.0), inc(0.0))
        assert 0.0 <= val < 1e-20

    def test_deep_tail_positive_and_finite(self):
        # Direct evaluation would cancel to zero (or worse) here.
        for lam in (-10.0, -20.0, -35.0):
            val = expected_improvement(post(-lam, 1.0), inc(0.0))
            assert np.isfinite(val)
            assert val >= 0.0

    def test_tail_branch_continuity(self):
        # The asymptotic branch takes over at lambda = -8; both sides of
        # the seam must agree closely.
        v_hi = ei_values(np.array([7.999]), np.array([1.0]), 0.0)[0]
        v_lo = ei_values(np.array([8.001]), np.array([1.0]), 0.0)[0]
        assert v_lo == pytest.approx(v_hi, rel=1e-3)

    def test_monotone_in_mu(self):
        rng = np.random.default_rng(30)
        for _ in range(20):
            tau = float(rng.normal())
            sigma = float(rng.uniform(0.1, 2.0))
            mus = np.sort(rng.normal(size=10, scale=3.0))
            vals = ei_values(mus, np.full(10, sigma), tau)
            assert np.all(np.diff(vals) <= 1e-12)

    def test_mc_oracle(self):
        rng = np.random.default_rng(31)
        n = 200_000
        for _ in range(25):
            mu = float(rng.normal())
            sigma = float(rng.uniform(0.05, 2.0))
            tau = float(rng.normal())
            draws = rng.normal(mu, sigma, size=n)
            imp = np.maximum(0.0, tau - draws)
            mc = imp.mean()
            se = imp.std() / math.sqrt(n)
            closed = expected_improvement(post(mu, sigma), inc(tau))
            assert abs(closed - mc) <= 3 * se + 1e-12

    def test_requires_incumbent(self):
        with pytest.raises(ContractViolation):
            expected_improvement(post(0.0, 1.0), Incumbent.none())


class TestProbabilityOfFeasibility:
    def test_hand_values(self):
        assert probability_of_feasibility(post(0.0, 1.0)) == 0.5
        assert probability_of_feasibility(post(-1.0, 1.0)) == pytest.approx(0.841345, abs=1e-6)
        assert probability_of_feasibility(post(3.0, 1e-15)) == 0.0
        assert probability_of_feasibility(post(-3.0, 1e-15)) == 1.0
        assert probability_of_feasibility(post(0.0, 1e-15)) == 0.5

    def test_bounds_and_symmetry(self):
        rng = np.random.default_rng(32)
        mus = rng.normal(size=200, scale=3)
        sigmas = rng.uniform(0.01, 3, size=200)
        vals = pf_values(mus, sigmas)
        assert np.all((vals >= 0) & (vals <= 1))
        flipped = pf_values(-mus, sigmas)
        np.testing.assert_allclose(vals + flipped, 1.0, atol=1e-12)


class TestWeightedEi:
    def test_empty_product_equals_ei(self):
        ps = PosteriorSet(objective=post(0.3, 0.7), constraints=[])
        assert weighted_ei(ps, inc(1.0)) == expected_improvement(ps.objective, inc(1.0))

    def test_direct_product(self):
        # Constraint posteriors with PF exactly 0.5 each.
        ps = PosteriorSet(objective=post(0.0, 1.0),
                          constraints=[post(0.0, 1.0), post(0.0, 2.0)])
        ei = expected_improvement(ps.objective, inc(0.0))
        assert weighted_ei(ps, inc(0.0)) == pytest.approx(0.25 * ei, rel=1e-12)

    def test_certain_feasibility_preserves_ei(self):
        ps = PosteriorSet(objective=post(0.0, 1.0),
                          constraints=[post(-10.0, 0.1), post(-10.0, 0.1)])
        ratio = weighted_ei(ps, inc(0.5)) / expected_improvement(ps.objective, inc(0.5))
        assert 1 - 1e-6 <= ratio <= 1.0

    def test_never_exceeds_ei(self):
        rng = np.random.default_rng(33)
        for _ in range(100):
            ps = PosteriorSet(
                objective=post(float(rng.normal()), float(rng.uniform(0.01, 2))),
                constraints=[post(float(rng.normal()), float(rng.uniform(0.01, 2)))
                             for _ in range(int(rng.integers(1, 4)))],
            )
            tau = float(rng.normal())
            assert weighted_ei(ps, inc(tau)) <= expected_improvement(ps.objective, inc(tau)) + 1e-15


class TestFirstFeasibleScore:
    def test_hand_values(self):
        def ps(*means):
            return PosteriorSet(objective=post(0.0, 1.0),
                                constraints=[post(m, 1.0) for m in means])
        assert first_feasible_score(ps(-1.0, -0.5)) == 0.0
        assert first_feasible_score(ps(2.0, -1.0)) == 2.0
        assert first_feasible_score(ps(0.5, 0.25, 3.0)) == 3.75

    def test_zero_iff_feasible_means(self):
        rng = np.random.default_rng(34)
        for _ in range(50):
            means = rng.normal(size=3)
            ps = PosteriorSet(objective=post(0.0, 1.0),
                              constraints=[post(float(m), 1.0) for m in means])
            score = first_feasible_score(ps)
            if np.all(means <= 0):
                assert score == 0.0
            else:
                assert score > 0.0

    def test_requires_constraints(self):
        with pytest.raises(ContractViolation):
            first_feasible_score(PosteriorSet(objective=post(0.0, 1.0), constraints=[]))
