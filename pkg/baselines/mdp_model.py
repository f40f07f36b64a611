"""
MDP MODEL - certainty-equivalence baseline that treats observations as states

Counts give P(o' | o, a), r(o, a) and the law of O_1; finite-horizon dynamic
programming then evaluates the target policy in that fitted MDP. It is
consistent when observations reveal the state and biased otherwise.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import UnvisitedCellWarning
from simulation.tabular_pomdp import EvalPolicy, as_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ObservationMDP:
    """Fitted model; transition[t-1] maps step t to t+1, reward[t-1] is step t"""

    initial: np.ndarray     # (O,)
    transition: np.ndarray  # (H-1, O, A, O)
    reward: np.ndarray      # (H, O, A)
    unvisited: int
    pooled: bool

    @property
    def horizon(self) -> int:
        return self.reward.shape[0]


def _normalize(counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalize the last axis; empty rows become uniform"""
    totals = counts.sum(axis=-1, keepdims=True)
    empty = totals[..., 0] == 0
    probs = np.divide(counts, totals, out=np.full(counts.shape, 1.0 / counts.shape[-1]), where=totals > 0)
    return probs, empty


def fit_observation_mdp(data, n_obs: int, n_actions: int, pooled: bool = True) -> ObservationMDP:
    """
    Count-based model of the observation process.

    With pooled=True one transition table and one reward table are shared by
    every step (the logged process is time-homogeneous in the benchmarks);
    otherwise each step gets its own.
    """
    batch = as_batch(data)
    H = batch.horizon
    obs = batch.observations[:, 1:]
    acts = batch.actions

    trans_counts = np.zeros((max(H - 1, 0), n_obs, n_actions, n_obs))
    reward_sums = np.zeros((H, n_obs, n_actions))
    visits = np.zeros((H, n_obs, n_actions))
    for c in range(H):
        np.add.at(visits[c], (obs[:, c], acts[:, c]), 1.0)
        np.add.at(reward_sums[c], (obs[:, c], acts[:, c]), batch.rewards[:, c])
        if c < H - 1:
            np.add.at(trans_counts[c], (obs[:, c], acts[:, c], obs[:, c + 1]), 1.0)

    if pooled:
        visits = np.broadcast_to(visits.sum(axis=0), visits.shape)
        reward_sums = np.broadcast_to(reward_sums.sum(axis=0), reward_sums.shape)
        trans_counts = np.broadcast_to(trans_counts.sum(axis=0), trans_counts.shape)

    transition, empty_transitions = _normalize(trans_counts)
    reward = np.divide(reward_sums, visits, out=np.zeros(visits.shape), where=visits > 0)

    unvisited_cells = visits == 0
    unvisited = int(unvisited_cells[0].sum() if pooled else unvisited_cells.sum())
    no_successor = int(empty_transitions[:1].sum() if pooled else empty_transitions.sum())
    if unvisited or no_successor:
        message = (f"{unvisited} (observation, action) cells never visited, "
                   f"{no_successor} without an observed successor; uniform transitions and zero rewards used")
        warnings.warn(message, UnvisitedCellWarning)
        logger.warning(message)

    initial = np.bincount(obs[:, 0], minlength=n_obs) / len(batch)
    return ObservationMDP(initial, transition, reward, unvisited, pooled)


def _policy_value_markov(model: ObservationMDP, eval_policy: EvalPolicy, gamma: float) -> float:
    H = model.horizon
    actions = eval_policy.table
    states = np.arange(model.initial.shape[0])
    value = np.zeros(model.initial.shape[0])
    for t in range(H, 0, -1):
        value = model.reward[t - 1][states, actions] + (
            gamma * model.transition[t - 1][states, actions] @ value if t < H else 0.0
        )
    return float(model.initial @ value)


def _policy_value_history(model: ObservationMDP, eval_policy: EvalPolicy, gamma: float) -> float:
    H = model.horizon

    def value_from(t: int, obs_hist: Tuple[int, ...], act_hist: Tuple[int, ...]) -> float:
        o = obs_hist[-1]
        a = eval_policy.act(obs_hist, act_hist)
        total = model.reward[t - 1][o, a]
        if t < H:
            successors = model.transition[t - 1][o, a]
            for o_next in np.flatnonzero(successors):
                total += gamma * successors[o_next] * value_from(t + 1, obs_hist + (int(o_next),), act_hist + (a,))
        return total

    return float(sum(model.initial[o] * value_from(1, (int(o),), ()) for o in np.flatnonzero(model.initial)))


def mdp_dp(
    data,
    eval_policy: EvalPolicy,
    gamma: float,
    n_obs: int,
    n_actions: int,
    horizon: Optional[int] = None,
    pooled: bool = True,
) -> float:
    """Value of the target policy in the fitted observation MDP"""
    model = fit_observation_mdp(data, n_obs, n_actions, pooled=pooled)
    if horizon is not None and horizon != model.horizon:
        raise ValueError(f"data horizon {model.horizon} != requested horizon {horizon}")
    if eval_policy.reads_history:
        return _policy_value_history(model, eval_policy, gamma)
    return _policy_value_markov(model, eval_policy, gamma)
