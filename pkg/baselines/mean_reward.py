"""
MEAN REWARD - naive baseline: average discounted logged return
"""

import numpy as np

from simulation.tabular_pomdp import as_batch


def mean_r(data, gamma: float) -> float:
    """(1/n) sum_i sum_t gamma^(t-1) R_t^(i); ignores the target policy entirely"""
    batch = as_batch(data)
    return float(np.mean(batch.discounted_returns(gamma)))
