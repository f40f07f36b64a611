"""Small models shared by several test modules"""

import numpy as np

from simulation.tabular_pomdp import TabularPOMDP, noisy_emission


def single_action_model(horizon: int = 2) -> TabularPOMDP:
    """Three sticky states, one action, noisy observations; every bridge system is invertible"""
    transition = np.full((3, 1, 3), 0.15)
    for s in range(3):
        transition[s, 0, s] = 0.7
    return TabularPOMDP.homogeneous(
        transition=transition,
        reward=[[1.0], [0.0], [2.0]],
        obs_kernel=noisy_emission(3, 0.2),
        prior_state=[0.4, 0.35, 0.25],
        prior_action=[[1.0], [1.0], [1.0]],
        horizon=horizon,
    )
