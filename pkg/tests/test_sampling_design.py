"""Optimal input-sampling distribution and its variance guarantees."""

import itertools

import numpy as np
import pytest

from dualrater import Policy, nu_of_x, optimal_input_distribution

from conftest import three_sigma_mean


def _simplex_grid(dim: int, steps: int):
    """All strictly positive pmfs with entries k / steps."""
    for cut in itertools.combinations(range(1, steps), dim - 1):
        parts = np.diff([0, *cut, steps])
        if np.all(parts > 0):
            yield parts / steps


class TestOptimalInputDistribution:
    def test_two_point_direct_evaluation(self):
        design = optimal_input_distribution(np.array([0.5, 0.5]), np.array([1.0, 4.0]))
        np.testing.assert_allclose(design.q_star, [1 / 3, 2 / 3], rtol=1e-12)

    def test_constant_profile_keeps_base_distribution(self):
        p = np.array([0.2, 0.3, 0.5])
        design = optimal_input_distribution(p, np.full(3, 2.7))
        np.testing.assert_allclose(design.q_star, p, rtol=1e-12)

    def test_normalization(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            nu = rng.uniform(0.1, 5.0, 6)
            design = optimal_input_distribution(p, nu)
            assert abs(design.q_star.sum() - 1.0) < 1e-12
            assert np.all(design.q_star > 0)

    def test_attains_simplex_grid_minimum(self):
        # objective: sum_x p_x^2 nu_x / q_x, minimized over pmfs q
        rng = np.random.default_rng(1)
        for _ in range(5):
            p = rng.dirichlet(np.ones(5) * 3)
            nu = rng.uniform(0.2, 4.0, 5)
            design = optimal_input_distribution(p, nu)

            def objective(q):
                return float(np.sum(p * p * nu / q))

            ours = objective(design.q_star)
            best_grid = min(objective(q) for q in _simplex_grid(5, 24))
            assert ours <= best_grid + 1e-12
            # and the grid gets within its resolution of our optimum
            assert best_grid <= ours * (1 + 0.5)

    def test_variance_no_worse_than_base_sampling(self):
        # closed form: Var_P = E_P[nu] - theta^2, Var_Q* = (E_P[sqrt(nu)])^2 - theta^2
        rng = np.random.default_rng(2)
        for _ in range(25):
            p = rng.dirichlet(np.ones(5))
            nu = rng.uniform(0.05, 5.0, 5)
            var_p = float(np.dot(p, nu))
            var_q = float(np.dot(p, np.sqrt(nu))) ** 2
            assert var_q <= var_p + 1e-12

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            optimal_input_distribution(np.array([0.5, 0.6]), np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            optimal_input_distribution(np.array([0.5, 0.5]), np.array([0.0, 0.0]))
        with pytest.raises(ValueError):
            optimal_input_distribution(np.array([0.5, 0.5]), np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            optimal_input_distribution(np.array([0.5, 0.5]), np.array([-1.0, 1.0]))


class TestNuOfX:
    def test_full_sampling_leaves_second_moment(self):
        base = Policy(kind="base")
        e_h2 = np.array([0.5, 1.2, 3.0])
        u = np.array([0.1, 0.2, 0.3])
        np.testing.assert_allclose(nu_of_x(base, e_h2, u), e_h2)

    def test_gaussian_closed_form(self):
        # mean-zero strong rating: E[H^2 | x] = Var(H) for every x
        policy = Policy(kind="active", gamma=0.5, tau=10.0)
        var_h = 1.3
        u = np.array([0.04, 0.25, 1.0])
        pi = policy.pi_for_u(u)
        expected = var_h + (1.0 / pi - 1.0) * u
        np.testing.assert_allclose(nu_of_x(policy, np.full(3, var_h), u), expected)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        policy = Policy(kind="random", p=0.2)
        values = nu_of_x(policy, rng.uniform(0, 2, 50), rng.uniform(0, 1, 50))
        assert np.all(values >= 0)


class TestReweightedEstimator:
    def test_unbiased_under_optimal_input_sampling(self):
        # five-strata model with per-stratum offsets as the weak-rater error
        p = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
        means = np.array([-1.0, 0.5, 0.2, 1.5, -0.3])
        sds = np.array([0.5, 1.0, 0.8, 1.2, 0.3])
        offsets = np.array([0.1, 0.6, 0.02, 0.9, 0.3])
        theta_star = float(np.dot(p, means))
        policy = Policy(kind="active", gamma=0.9, tau=5.0)
        u = offsets**2
        pi = policy.pi_for_u(u)
        nu = means**2 + sds**2 + (1.0 / pi - 1.0) * u
        design = optimal_input_distribution(p, nu)

        rng = np.random.default_rng(4)
        n = 200_000
        x = rng.choice(5, size=n, p=design.q_star)
        h = rng.normal(means[x], sds[x])
        g = h + offsets[x]
        xi = rng.random(n) < pi[x]
        increments = design.likelihood_ratio[x] * (g + (h - g) * xi / pi[x])
        gap, tol = three_sigma_mean(increments, theta_star)
        assert gap < tol
