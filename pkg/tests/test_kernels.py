import unittest

import numpy as np
import numpy.testing as np_test

from nuisance.kernels import KernelSpec, embed, embed_columns, gram
from nuisance.tabular_fn import TabularFn, unique_pairs
from reduction.pci_schemes import ControlKind, ControlSpec, ControlValue


class TestEmbedding(unittest.TestCase):
    def test_one_hot(self):
        vec = embed(ControlValue(ControlKind.OBS, 2.0), 1, ControlSpec(ControlKind.OBS, 3), 2)
        np_test.assert_array_equal(vec, [0, 0, 1, 0, 1])

    def test_reward_kept_raw(self):
        rows = embed_columns(np.array([-2.0, 8.0]), np.array([0, 1]), ControlSpec(ControlKind.REWARD, 1), 2)
        np_test.assert_array_equal(rows, [[-2.0, 1, 0], [8.0, 0, 1]])


class TestGram(unittest.TestCase):
    def setUp(self):
        self.points = embed_columns(np.array([0, 1, 2, 1]), np.array([0, 0, 1, 1]), ControlSpec(ControlKind.OBS, 3), 2)

    def test_symmetric_unit_diagonal(self):
        K = gram(KernelSpec(), self.points, self.points)
        np_test.assert_allclose(K, K.T)
        np_test.assert_allclose(np.diag(K), 1.0)
        self.assertTrue(np.all(K > 0))

    def test_positive_definite_on_distinct_points(self):
        K = gram(KernelSpec(), self.points, self.points)
        self.assertGreater(np.linalg.eigvalsh(K).min(), 0.0)

    def test_calibration(self):
        kernel = KernelSpec().calibrated(self.points)
        np_test.assert_allclose(kernel.bandwidth, np.mean(np.var(self.points, axis=0)))
        self.assertEqual(KernelSpec().calibrated(np.ones((4, 2))).bandwidth, 1e-6)

    def test_bad_scales(self):
        with self.assertRaises(ValueError):
            KernelSpec(scale_multipliers=(1.0, 0.0))


class TestTabularFn(unittest.TestCase):
    def test_lookup_and_unseen(self):
        f = TabularFn(((0.0, 0), (1.0, 1)), [2.0, 3.0], default_value=1.0)
        np_test.assert_array_equal(f.lookup(np.array([1.0, 0.0, 2.0]), np.array([1, 0, 0])), [3.0, 2.0, 1.0])
        self.assertEqual(f.unseen_lookups, 1)
        self.assertEqual(f(5.0, 1), 1.0)
        self.assertEqual(f.unseen_lookups, 2)

    def test_action_sum(self):
        f = TabularFn(((0.0, 0), (0.0, 1)), [2.0, 5.0], default_value=0.0)
        np_test.assert_array_equal(f.action_sum(np.array([0.0, 0.0]), 2), [7.0, 7.0])

    def test_constant_never_counts(self):
        f = TabularFn.constant(1.0)
        np_test.assert_array_equal(f.lookup(np.array([3.0]), 0), [1.0])
        self.assertEqual(f.unseen_lookups, 0)

    def test_duplicate_support(self):
        with self.assertRaises(ValueError):
            TabularFn(((0.0, 0), (0.0, 0)), [1.0, 2.0], default_value=0.0)

    def test_unique_pairs(self):
        support, inverse = unique_pairs(np.array([1.0, 0.0, 1.0]), np.array([0, 1, 0]))
        self.assertEqual(support, ((0.0, 1), (1.0, 0)))
        np_test.assert_array_equal(inverse, [1, 0, 1])


if __name__ == "__main__":
    unittest.main()
