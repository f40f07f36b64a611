import itertools
import unittest
import warnings

import numpy as np
import numpy.testing as np_test

from baselines.mdp_model import fit_observation_mdp, mdp_dp
from baselines.mean_reward import mean_r
from baselines.tis import NO_NEXT, fit_tis_nuisance, tis, tis_value
from errors import SingularQMatrixWarning, UnvisitedCellWarning
from oracle.population_oracle import enumerate_law
from simulation.simulator import exact_policy_value, sample_batch
from simulation.tabular_pomdp import EvalPolicy, TrajectoryBatch, build_noisyobs, build_sticky_shift


def brute_force_tis(batch: TrajectoryBatch, nuisance, policy: EvalPolicy, gamma: float) -> float:
    """Average over every choice of one row per Omega_0..Omega_H"""
    n, H = len(batch), batch.horizon
    obs, acts, rews = batch.observations, batch.actions, batch.rewards
    total = 0.0
    for rows in itertools.product(range(n), repeat=H + 1):
        x_prev = obs[rows[0], 1]
        weight = 1.0
        value = 0.0
        for t in range(1, H + 1):
            i = rows[t]
            z, w, a = obs[i, t - 1], obs[i, t], acts[i, t - 1]
            if policy.act((w,), ()) != a:
                break
            weight *= nuisance.rho_at(t, z, a, x_prev)
            value += gamma ** (t - 1) * weight * rews[i, t - 1]
            x_prev = obs[i, t + 1] if t < H else NO_NEXT
        total += value
    return total / n ** (H + 1)


class TestMeanReward(unittest.TestCase):
    def test_discounted_average(self):
        batch = TrajectoryBatch(np.zeros((2, 3), int), np.zeros((2, 2), int), [[1.0, 2.0], [3.0, 4.0]])
        np_test.assert_allclose(mean_r(batch, 0.5), (2.0 + 5.0) / 2)


class TestTis(unittest.TestCase):
    def test_factorized_matches_brute_force(self):
        scenario = build_sticky_shift(0.2, horizon=2)
        for seed, n in ((0, 4), (1, 5), (2, 6)):
            batch = sample_batch(scenario.pomdp, scenario.behavior, n, seed=seed)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                nuisance = fit_tis_nuisance(batch, 3, 2)
            for name in ("stay", "mixed"):
                policy = scenario.policy(name)
                np_test.assert_allclose(
                    tis_value(nuisance, policy, 0.9),
                    brute_force_tis(batch, nuisance, policy, 0.9),
                    rtol=1e-10, atol=1e-12, err_msg=f"seed={seed} {name}",
                )

    def test_single_observation_is_conditional_mean(self):
        # one observation: rho = 1 / P(A_t = a), so TIS = sum_t gamma^(t-1) E[R_t | A_t = e]
        actions = np.array([[0, 1], [1, 1], [1, 0], [0, 0]])
        rewards = np.array([[1.0, 2.0], [3.0, 5.0], [4.0, -1.0], [0.0, 7.0]])
        batch = TrajectoryBatch(np.zeros((4, 3), int), actions, rewards)
        policy = EvalPolicy.from_table([1], 2)
        expected = rewards[actions[:, 0] == 1, 0].mean() + 0.5 * rewards[actions[:, 1] == 1, 1].mean()
        np_test.assert_allclose(tis(batch, policy, 0.5, n_obs=1, n_actions=2), expected, rtol=1e-12)

    def test_population_value_on_full_rank_model(self):
        scenario = build_sticky_shift(0.2, horizon=2)
        batch, probs = enumerate_law(scenario.pomdp, scenario.behavior, None, 1).observable().to_batch()
        nuisance = fit_tis_nuisance(batch, 3, 2, weights=probs)
        self.assertFalse(nuisance.low_confidence)
        for name, policy in scenario.policies.items():
            truth = exact_policy_value(scenario.pomdp, policy, 1.0)
            np_test.assert_allclose(tis_value(nuisance, policy, 1.0), truth, atol=1e-8, err_msg=name)

    def test_singular_matrices_flagged(self):
        scenario = build_noisyobs(0.0, horizon=2)
        batch, probs = enumerate_law(scenario.pomdp, scenario.behavior, None, 1).observable().to_batch()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            nuisance = fit_tis_nuisance(batch, 3, 2, weights=probs)
        self.assertTrue(nuisance.low_confidence)
        self.assertTrue(any(issubclass(w.category, SingularQMatrixWarning) for w in caught))

    def test_bad_weights(self):
        batch = TrajectoryBatch(np.zeros((2, 2), int), np.zeros((2, 1), int), np.ones((2, 1)))
        with self.assertRaises(ValueError):
            fit_tis_nuisance(batch, 1, 1, weights=[1.0, -1.0])


class TestMdp(unittest.TestCase):
    def test_single_state_chain(self):
        actions = np.array([[0, 1, 0], [1, 1, 0], [0, 0, 1]])
        reward_of = np.array([2.0, -1.0])
        batch = TrajectoryBatch(np.zeros((3, 4), int), actions, reward_of[actions])
        for a in (0, 1):
            value = mdp_dp(batch, EvalPolicy.constant(a, 1, 2), 0.9, n_obs=1, n_actions=2)
            np_test.assert_allclose(value, reward_of[a] * (1 + 0.9 + 0.81))

    def test_history_policy_agrees_with_table_policy(self):
        scenario = build_noisyobs(0.2, horizon=3)
        batch = sample_batch(scenario.pomdp, scenario.behavior, 500, seed=4)
        table_policy = scenario.policy("hard")
        history_policy = EvalPolicy.history(lambda obs, acts: np.eye(2)[table_policy.table[obs[-1]]], 2)
        np_test.assert_allclose(
            mdp_dp(batch, history_policy, 1.0, 3, 2),
            mdp_dp(batch, table_policy, 1.0, 3, 2),
            rtol=1e-12,
        )

    def test_consistent_when_observations_are_states(self):
        scenario = build_noisyobs(0.0, horizon=3)
        batch, probs = enumerate_law(scenario.pomdp, scenario.behavior, None, 1).observable().to_batch()
        # a large sample stands in for the population law
        rng = np.random.default_rng(0)
        big = batch.take(rng.choice(len(batch), size=200000, p=probs))
        for name, policy in scenario.policies.items():
            estimate = mdp_dp(big, policy, 1.0, 3, 2)
            self.assertLess(abs(estimate - exact_policy_value(scenario.pomdp, policy, 1.0)), 0.1, name)

    def test_unvisited_cells_warn(self):
        batch = TrajectoryBatch(np.zeros((2, 3), int), np.zeros((2, 2), int), np.ones((2, 2)))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = fit_observation_mdp(batch, n_obs=2, n_actions=2)
        self.assertTrue(any(issubclass(w.category, UnvisitedCellWarning) for w in caught))
        self.assertEqual(model.unvisited, 3)
        np_test.assert_allclose(model.transition[0, 1, 1], [0.5, 0.5])

    def test_horizon_mismatch(self):
        batch = TrajectoryBatch(np.zeros((2, 3), int), np.zeros((2, 2), int), np.ones((2, 2)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with self.assertRaises(ValueError):
                mdp_dp(batch, EvalPolicy.constant(0, 2, 2), 1.0, 2, 2, horizon=3)


if __name__ == "__main__":
    unittest.main()
