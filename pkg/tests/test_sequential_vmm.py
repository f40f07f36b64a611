import json
import unittest

import numpy as np
import numpy.testing as np_test

from config import VmmConfig
from errors import SingularSystem
from nuisance.kernels import KernelSpec
from nuisance.sequential_vmm import (
    _solve_moment_problem,
    compute_h,
    compute_q,
    fit_nuisances,
    fit_nuisances_table,
)
from nuisance.tabular_fn import TabularFn
from oracle.population_oracle import LawTable, solve_from_moments
from reduction.pci_schemes import PciScheme, build_control_table
from simulation.simulator import sample_batch
from simulation.tabular_pomdp import BehaviorPolicy, EvalPolicy, build_sticky_shift
from tests.fixtures import single_action_model


class TestMomentSolver(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        root = rng.normal(size=(6, 6))
        self.Q = root @ root.T + 0.5 * np.eye(6)
        self.B = rng.normal(size=(6, 4))
        self.c = rng.normal(size=6)
        self.ridge = rng.uniform(0.1, 0.5, size=4)

    def test_matches_closed_form(self):
        values, diagnostics = _solve_moment_problem(
            self.Q, self.B, self.c, self.ridge, 1e-2, 1e-10, 1, "q", np.ones(4)
        )
        Qi = np.linalg.pinv(self.Q)
        expected = np.linalg.pinv(self.B.T @ Qi @ self.B + 1e-2 * np.diag(self.ridge)) @ self.B.T @ Qi @ self.c
        np_test.assert_allclose(values, expected, rtol=1e-8, atol=1e-10)
        self.assertLess(diagnostics["residual"], 1e-8)
        self.assertLessEqual(diagnostics["objective"], diagnostics["objective_prior"])
        self.assertEqual(diagnostics["support_size"], 4)

    def test_singular_normal_matrix(self):
        B = self.B.copy()
        B[:, 0] = 0.0
        with self.assertRaises(SingularSystem) as ctx:
            _solve_moment_problem(self.Q, B, self.c, self.ridge, 0.0, 0.0, 2, "h", np.zeros(4))
        self.assertEqual((ctx.exception.t, ctx.exception.which), (2, "h"))


class TestSequentialVmm(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.scenario = build_sticky_shift(0.2, horizon=2)
        cls.policy = cls.scenario.policy("mixed")
        cls.scheme = PciScheme.parse("prev_obs")
        batch = sample_batch(cls.scenario.pomdp, cls.scenario.behavior, 300, seed=21)
        cls.batch = batch
        cls.table = build_control_table(batch, cls.policy, cls.scheme, 3)
        cls.config = VmmConfig(alpha=1e-4, lam=1e-4)
        cls.nuisances = fit_nuisances_table(cls.table, cls.config, 1.0)

    def test_shapes_and_diagnostics(self):
        self.assertEqual(self.nuisances.horizon, 2)
        for f in self.nuisances.q + self.nuisances.h:
            self.assertTrue(np.all(np.isfinite(f.values)))
            self.assertIn("condition_Q", f.diagnostics)
        blob = json.loads(self.nuisances.diagnostics_json())
        self.assertEqual(blob["n"], 300)
        self.assertEqual(len(blob["unseen_lookups"]["q"]), 2)

    def test_objective_not_above_prior(self):
        for f in self.nuisances.q + self.nuisances.h:
            prior = f.diagnostics["objective_prior"]
            self.assertLessEqual(f.diagnostics["objective"], prior + 1e-9 * (1.0 + abs(prior)))

    def test_zero_outcome_gives_zero_h(self):
        eta = np.ones(len(self.table))
        h = compute_h(self.table, 2, self.config, TabularFn.constant(0.0), KernelSpec(), eta, np.zeros(len(self.table)))
        np_test.assert_allclose(h.values, 0.0, atol=1e-12)

    def test_h_invariant_to_row_order(self):
        order = np.random.default_rng(4).permutation(len(self.table))
        mu = self.table.matched[:, 1] * self.table.r[:, 1]
        eta = np.ones(len(self.table))
        h = compute_h(self.table, 2, self.config, TabularFn.constant(0.0), KernelSpec(), eta, mu)
        h_perm = compute_h(self.table.take(order), 2, self.config, TabularFn.constant(0.0), KernelSpec(),
                           eta, mu[order])
        self.assertEqual(h.support, h_perm.support)
        np_test.assert_allclose(h_perm.values, h.values, rtol=1e-7, atol=1e-9)

    def test_eta_shape_checked(self):
        with self.assertRaises(ValueError):
            compute_q(self.table, 1, self.config, TabularFn.constant(1.0), KernelSpec(), np.ones(3))

    def test_raw_trajectory_entry_point(self):
        again = fit_nuisances(self.batch, self.policy, self.scheme, self.scenario.pomdp.alphabets, self.config, 1.0)
        for f, g in zip(again.q + again.h, self.nuisances.q + self.nuisances.h):
            np_test.assert_allclose(f.values, g.values)

    def test_empty_dataset(self):
        with self.assertRaises(ValueError):
            fit_nuisances_table(self.table.take(np.array([], dtype=int)), self.config, 1.0)


class TestUnregularizedMatchesMomentSolve(unittest.TestCase):
    """Unregularized kernel fits are the roots of the tabular moment equations"""

    def check(self, horizon: int, policy_name: str):
        scenario = build_sticky_shift(0.2, horizon=horizon)
        policy = scenario.policy(policy_name)
        batch = sample_batch(scenario.pomdp, scenario.behavior, 2000, seed=17)
        table = build_control_table(batch, policy, PciScheme.parse("prev_obs"), 3)
        fitted = fit_nuisances_table(table, VmmConfig(alpha=0.0, lam=0.0, jitter=0.0), 0.9)
        direct = solve_from_moments(scenario.pomdp, scenario.behavior, policy, PciScheme.parse("prev_obs"), 0.9,
                                    logging_table=LawTable(table, np.full(len(table), 1.0 / len(table))))
        self.assertEqual(fitted.horizon, horizon)
        for ours, exact in zip(fitted.q + fitted.h, direct.q + direct.h):
            controls = np.array([p[0] for p in exact.support])
            actions = np.array([p[1] for p in exact.support])
            np_test.assert_allclose(ours.lookup(controls, actions), exact.values, rtol=1e-4, atol=1e-5)

    def test_one_step(self):
        self.check(1, "stay")

    def test_two_steps(self):
        self.check(2, "mixed")


class TestSingleAction(unittest.TestCase):
    def test_q_is_one_without_regularization(self):
        pomdp = single_action_model(horizon=2)
        behavior = BehaviorPolicy.homogeneous([[1.0]] * 3, 2)
        policy = EvalPolicy.constant(0, 3, 1)
        batch = sample_batch(pomdp, behavior, 500, seed=13)
        config = VmmConfig(alpha=0.0, lam=0.0)
        nuisances = fit_nuisances(batch, policy, PciScheme.parse("prev_obs"), pomdp.alphabets, config, 1.0)
        for f in nuisances.q:
            np_test.assert_allclose(f.values, 1.0, atol=1e-6)


if __name__ == "__main__":
    unittest.main()
