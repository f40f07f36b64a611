"""Full-size checks; enable with PRL_SLOW_TESTS=1"""

import tempfile
import unittest
from pathlib import Path

import numpy as np

import experiment_runner
from config import SLOW_TESTS, VmmConfig, load_config_dict
from nuisance.sequential_vmm import fit_nuisances
from oracle.certificates import run_certificates
from oracle.population_oracle import solve_oracle_nuisances
from reduction.pci_schemes import PciScheme
from simulation.simulator import sample_batch
from simulation.tabular_pomdp import build_sticky_shift

PREV_OBS = PciScheme.parse("prev_obs")


def sup_error(fitted, oracle) -> float:
    worst = 0.0
    for ours, exact in zip(fitted.q + fitted.h, oracle.q + oracle.h):
        controls = np.array([p[0] for p in exact.support])
        actions = np.array([p[1] for p in exact.support])
        worst = max(worst, float(np.max(np.abs(ours.lookup(controls, actions) - exact.values))))
    return worst


@unittest.skipUnless(SLOW_TESTS, "set PRL_SLOW_TESTS=1")
class TestAcceptance(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def run_grid(self, name: str, **settings):
        data = {"output_dir": str(Path(self.tmp.name) / name), **settings}
        return experiment_runner.run(load_config_dict(data))

    def test_certificates_at_full_horizon(self):
        scenario = build_sticky_shift(0.2, horizon=3)
        report = run_certificates(scenario, PREV_OBS, 1.0, directions=20, seed=0)
        self.assertTrue(report["passed"])

    def test_dr_is_unbiased_and_covers(self):
        for policy in ("stay", "shift", "mixed"):
            summary = self.run_grid(policy, scenario="sticky_shift", policy=policy, horizon=2, n_grid=[2000],
                                    replications=100, methods=["dr"])
            row = summary.row("dr", 2000)
            self.assertEqual(row["n_valid"], 100, policy)
            se = row["sd"] / np.sqrt(row["n_valid"])
            self.assertLessEqual(abs(row["bias"]), 3 * se, policy)
            self.assertGreaterEqual(row["coverage"], 0.85, policy)

    def test_bridge_recovery_improves_with_n(self):
        scenario = build_sticky_shift(0.2, horizon=2)
        policy = scenario.policy("mixed")
        oracle = solve_oracle_nuisances(scenario.pomdp, scenario.behavior, policy, PREV_OBS, 1.0)
        errors = {}
        for n in (500, 10000):
            errors[n] = np.median([
                sup_error(fit_nuisances(sample_batch(scenario.pomdp, scenario.behavior, n, seed=seed), policy,
                                        PREV_OBS, scenario.pomdp.alphabets, VmmConfig(), 1.0), oracle)
                for seed in range(5)
            ])
        self.assertLess(errors[10000], errors[500])

    def test_mse_shrinks_with_n(self):
        summary = self.run_grid("grid", scenario="sticky_shift", policy="mixed", horizon=2, n_grid=[500, 5000],
                                replications=10, methods=["dr", "mean_r"])
        self.assertEqual(summary.excluded["dr"], 0)
        self.assertLess(summary.mse("dr", 5000), summary.mse("dr", 500))

    def test_noisyobs_orderings(self):
        reps = 20
        for policy in ("hard", "optim"):
            summary = self.run_grid(policy, scenario="noisyobs", eps_noise=0.2, policy=policy, n_grid=[1000],
                                    replications=reps, methods=["dr", "mdp", "mean_r", "tis"])
            for method in ("dr", "mdp", "mean_r"):
                self.assertEqual(summary.row(method, 1000)["n_valid"], reps, f"{policy} {method}")
            self.assertGreaterEqual(summary.row("tis", 1000)["n_valid"], reps * 3 // 4, policy)

            mdp = summary.row("mdp", 1000)
            self.assertGreater(abs(mdp["bias"]), 3 * mdp["sd"] / np.sqrt(mdp["n_valid"]), policy)
            self.assertGreaterEqual(summary.row("tis", 1000)["sd"], 2 * summary.row("dr", 1000)["sd"], policy)


if __name__ == "__main__":
    unittest.main()
