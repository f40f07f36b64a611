import json
import unittest
import warnings
from unittest import mock

import numpy as np
import numpy.testing as np_test
from sklearn.model_selection import KFold

from config import VmmConfig
from errors import FoldFailed, NonStandardFoldingWarning, SingularSystem
from estimators.cross_fit import EstimateReport, assign_folds, estimate_value, estimate_values
from estimators.scores import ScoreKind
from reduction.pci_schemes import PciScheme
from simulation.simulator import sample_batch
from simulation.tabular_pomdp import build_sticky_shift


class TestFolds(unittest.TestCase):
    def test_balanced_and_seeded(self):
        labels = assign_folds(103, 5, seed=3)
        counts = np.bincount(labels)
        self.assertEqual(len(counts), 5)
        self.assertLessEqual(counts.max() - counts.min(), 1)
        np_test.assert_array_equal(labels, assign_folds(103, 5, seed=3))
        self.assertFalse(np.array_equal(labels, assign_folds(103, 5, seed=4)))

    def test_labels_follow_kfold(self):
        labels = assign_folds(50, 4, seed=9)
        splitter = KFold(n_splits=4, shuffle=True, random_state=9)
        for fold, (_, test) in enumerate(splitter.split(np.arange(50))):
            np_test.assert_array_equal(np.flatnonzero(labels == fold), np.sort(test))

    def test_single_fold_is_all_zeros(self):
        np_test.assert_array_equal(assign_folds(7, 1, seed=0), np.zeros(7, dtype=int))

    def test_too_few_rows(self):
        with self.assertRaises(ValueError):
            assign_folds(3, 5, seed=0)
        with self.assertRaises(ValueError):
            assign_folds(10, 0, seed=0)


class TestEstimateReport(unittest.TestCase):
    def test_interval_must_contain_estimate(self):
        with self.assertRaises(ValueError):
            EstimateReport(1.0, [1.0], 0.1, (1.5, 2.0), 10, ScoreKind.DR)

    def test_csv_row_and_json(self):
        report = EstimateReport(1.0, [0.9, 1.1], 0.25, (0.8, 1.2), 20, ScoreKind.IS, {"max_eta": 3.0})
        row = report.csv_row("is", seed=7)
        self.assertEqual(row["score_kind"], "is")
        self.assertEqual(row["max_eta"], 3.0)
        self.assertIsNone(row["runtime_ms"])
        self.assertEqual(json.loads(report.to_json())["score"], "is")


class TestCrossFit(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.scenario = build_sticky_shift(0.2, horizon=2)
        cls.policy = cls.scenario.policy("shift")
        cls.scheme = PciScheme.parse("prev_obs")
        cls.config = VmmConfig(alpha=1e-4, lam=1e-4)
        cls.batch = sample_batch(cls.scenario.pomdp, cls.scenario.behavior, 400, seed=31)
        cls.reports = estimate_values(
            cls.batch, cls.policy, cls.scheme, cls.config, 1.0, kinds=list(ScoreKind), k_folds=4,
            alphabets=cls.scenario.pomdp.alphabets, seed=5,
        )

    def test_report_contents(self):
        for kind, report in self.reports.items():
            lo, hi = report.ci95
            self.assertTrue(lo <= report.estimate <= hi)
            self.assertGreaterEqual(report.sigma2, 0.0)
            self.assertEqual(report.n, 400)
            self.assertEqual(len(report.fold_estimates), 4)
            self.assertTrue(report.diagnostics["cross_fitted"])
            self.assertEqual(report.diagnostics["nonfinite_scores"], 0)
            self.assertEqual(len(report.diagnostics["matched_share"]), 2)
            np_test.assert_allclose(hi - lo, 2 * 1.959963984540054 * np.sqrt(report.sigma2 / 400), rtol=1e-12)

    def test_regression_and_dr_share_fits(self):
        dr_only = estimate_value(self.batch, self.policy, self.scheme, self.config, 1.0, ScoreKind.DR, 4,
                                 alphabets=self.scenario.pomdp.alphabets, seed=5)
        self.assertEqual(dr_only.estimate, self.reports[ScoreKind.DR].estimate)

    def test_permutation_with_labels(self):
        labels = assign_folds(400, 4, seed=5)
        order = np.random.default_rng(8).permutation(400)
        permuted = estimate_value(self.batch.take(order), self.policy, self.scheme, self.config, 1.0,
                                  alphabets=self.scenario.pomdp.alphabets, folds=labels[order])
        np_test.assert_allclose(permuted.estimate, self.reports[ScoreKind.DR].estimate, rtol=1e-6, atol=1e-9)

    def test_single_fold_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report = estimate_value(self.batch.take(np.arange(100)), self.policy, self.scheme, self.config, 1.0,
                                    k_folds=1, alphabets=self.scenario.pomdp.alphabets)
        self.assertTrue(any(issubclass(w.category, NonStandardFoldingWarning) for w in caught))
        self.assertFalse(report.diagnostics["cross_fitted"])

    def test_unseen_lookups_do_not_depend_on_score_kinds(self):
        small = self.batch.take(np.arange(30))
        counts = []
        for kinds in ([ScoreKind.DR], [ScoreKind.IS], list(ScoreKind)):
            reports = estimate_values(small, self.policy, self.scheme, self.config, 1.0, kinds=kinds, k_folds=3,
                                      alphabets=self.scenario.pomdp.alphabets, seed=2)
            seen = {r.diagnostics["unseen_lookups"] for r in reports.values()}
            self.assertEqual(len(seen), 1)
            counts.append(seen.pop())
        self.assertEqual(counts[0], counts[1])
        self.assertEqual(counts[0], counts[2])
        self.assertGreaterEqual(counts[0], 0)

    def test_fold_failure_is_wrapped(self):
        with mock.patch("estimators.cross_fit.fit_nuisances_table", side_effect=SingularSystem(1, "q", "forced")):
            with self.assertRaises(FoldFailed) as ctx:
                estimate_value(self.batch, self.policy, self.scheme, self.config, 1.0, k_folds=2,
                               alphabets=self.scenario.pomdp.alphabets)
        self.assertIsInstance(ctx.exception.__cause__, SingularSystem)
        self.assertIn(ctx.exception.fold, (0, 1))


if __name__ == "__main__":
    unittest.main()
