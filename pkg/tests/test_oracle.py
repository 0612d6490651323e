import unittest

import numpy as np
from numpy.testing import assert_allclose

from layered.core import ConstraintSpec, LayeredProblem, LtiSystem, OutputMap, make_problem, rollout, sample_system
from layered.errors import ConfigurationError, DimensionError
from layered.oracle import (build_oracle, difference_map, kkt_brute_force, optimal_dual_map, optimal_tracking,
                            plan_reference, solve_direct)


def scalar_oracle(Q=1.0):
    problem = LayeredProblem(LtiSystem([[1.0]], [[1.0]]), T=1, Q=[[Q]], R=[[1.0]], rho=2.0)
    return build_oracle(problem)


def random_problem(seed, d_x=3, d_u=2, T=4, **kwargs):
    return make_problem(sample_system(seed, d_x, d_u), T=T, **kwargs)


class TestScalarOracle(unittest.TestCase):
    def setUp(self):
        self.oracle = scalar_oracle()

    def test_closed_forms(self):
        o = self.oracle
        assert_allclose(o.Rbar, [[2.0]])
        assert_allclose(o.P, np.diag([1.0, 0.5]), atol=1e-12)
        assert_allclose(o.H, np.diag([-0.5, -2.0 / 3.0]), atol=1e-12)
        assert_allclose(o.G, [[-0.5], [-1.0 / 3.0]], atol=1e-12)
        assert_allclose(optimal_dual_map(o), [[-1.0], [-0.5]], atol=1e-12)

    def test_optimal_tracking(self):
        sol = optimal_tracking(self.oracle, [1.0, 2.0], [1.0])
        assert_allclose(sol.u, [0.5])
        assert_allclose(sol.x, [1.0, 1.5])
        self.assertAlmostEqual(sol.value, 0.5)

    def test_plan_without_dual(self):
        assert_allclose(plan_reference(self.oracle, [0.0, 0.0], [1.0]), [0.5, 1.0 / 3.0])

    def test_zero_state_cost(self):
        o = scalar_oracle(Q=0.0)
        H, _ = difference_map(o)
        assert_allclose(H, -np.eye(2), atol=1e-12)
        assert_allclose(o.Theta_star, np.zeros((2, 1)), atol=1e-12)


class TestTracking(unittest.TestCase):
    def test_free_response_needs_no_input(self):
        oracle = build_oracle(random_problem(1))
        xi = np.array([0.3, -1.0, 2.0])
        sol = optimal_tracking(oracle, oracle.Fz @ xi, xi)
        assert_allclose(sol.u, np.zeros(oracle.problem.n_input), atol=1e-10)
        self.assertAlmostEqual(sol.value, 0.0, places=10)

    def test_value_matches_cost(self):
        oracle = build_oracle(random_problem(2))
        problem = oracle.problem
        rng = np.random.default_rng(0)
        xi = rng.standard_normal(3)
        r_tilde = rng.standard_normal(problem.n_ref)
        sol = optimal_tracking(oracle, r_tilde, xi)
        gap = r_tilde - problem.outputs(sol.x)
        direct = sol.u @ problem.stacked_R @ sol.u + 0.5 * problem.rho * gap @ gap
        self.assertAlmostEqual(sol.value, direct, places=8)

    def test_batch_matches_columns(self):
        oracle = build_oracle(random_problem(3))
        rng = np.random.default_rng(1)
        R = rng.standard_normal((oracle.problem.n_ref, 4))
        X = rng.standard_normal((3, 4))
        batch = optimal_tracking(oracle, R, X)
        for i in range(4):
            single = optimal_tracking(oracle, R[:, i], X[:, i])
            assert_allclose(batch.u[:, i], single.u, atol=1e-12)
            self.assertAlmostEqual(batch.value[i], single.value, places=10)

    def test_dimension_checks(self):
        oracle = build_oracle(random_problem(3))
        with self.assertRaises(DimensionError):
            optimal_tracking(oracle, np.zeros(3), np.zeros(3))


class TestCompositionIdentities(unittest.TestCase):
    def test_plan_track_residual(self):
        rng = np.random.default_rng(5)
        for seed in range(5):
            oracle = build_oracle(random_problem(seed, rho=float(rng.uniform(0.5, 8.0))))
            problem = oracle.problem
            H, G = difference_map(oracle)
            self.assertLess(np.linalg.eigvalsh(H).max(), 0.0)
            self.assertGreater(np.linalg.eigvalsh(oracle.P).min(), 0.0)
            for _ in range(3):
                nu = rng.standard_normal(problem.n_ref)
                xi = rng.standard_normal(problem.d_x)
                r = plan_reference(oracle, nu, xi)
                sol = optimal_tracking(oracle, r + nu, xi)
                traj = rollout(problem, xi, sol.u)
                residual = r - problem.outputs(traj.x)
                assert_allclose(residual, H @ nu + G @ xi, atol=1e-8)

    def test_optimal_dual_is_fixed_point(self):
        for seed in range(5):
            oracle = build_oracle(random_problem(seed))
            H, G = difference_map(oracle)
            scale = 1 + np.linalg.norm(G)
            self.assertLess(np.linalg.norm(H @ oracle.Theta_star + G), 1e-9 * scale)

    def test_optimal_dual_recovers_direct_solution(self):
        oracle = build_oracle(random_problem(7))
        xi = np.array([1.0, -0.5, 0.25])
        nu = oracle.Theta_star @ xi
        r = plan_reference(oracle, nu, xi)
        sol = optimal_tracking(oracle, r + nu, xi)
        direct = solve_direct(oracle, xi)
        assert_allclose(sol.u, direct.u, atol=1e-8)
        assert_allclose(r, oracle.problem.outputs(direct.x), atol=1e-8)


class TestKkt(unittest.TestCase):
    def test_multiplier_matches_optimal_dual(self):
        for seed in range(4):
            oracle = build_oracle(random_problem(seed, rho=1.0 + seed))
            xi = np.random.default_rng(seed).standard_normal(3)
            kkt = kkt_brute_force(oracle.problem, xi)
            direct = solve_direct(oracle, xi)
            assert_allclose(kkt.nu, oracle.Theta_star @ xi, atol=1e-8)
            assert_allclose(kkt.u, direct.u, atol=1e-8)
            assert_allclose(kkt.r, kkt.x, atol=1e-8)

    def test_output_subset(self):
        problem = random_problem(4, output=OutputMap.select(3, [0, 2]))
        oracle = build_oracle(problem)
        xi = np.array([0.5, 1.0, -1.0])
        kkt = kkt_brute_force(problem, xi)
        assert_allclose(kkt.nu, oracle.Theta_star @ xi, atol=1e-8)
        assert_allclose(kkt.x, solve_direct(oracle, xi).x, atol=1e-8)

    def test_rejects_constrained_problem(self):
        problem = random_problem(0, T=2, constraints=ConstraintSpec.state_floor(2, 3, -0.05))
        with self.assertRaises(ConfigurationError):
            kkt_brute_force(problem, np.zeros(3))


if __name__ == "__main__":
    unittest.main()
