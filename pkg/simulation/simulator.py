"""
SIMULATOR - sampling under the confounded logging policy and exact enumeration

Sampling is vectorized over trajectories and pure in the seed. Enumeration
walks every positive-probability path and refuses once the worst-case path
count exceeds the budget.
"""

import logging
from typing import Iterator, Optional, Tuple

import numpy as np

from config import ENUMERATION_BUDGET
from errors import EnumerationTooLarge, ModelValidationError
from simulation.tabular_pomdp import (
    BehaviorPolicy,
    EvalPolicy,
    HiddenPath,
    Step,
    TabularPOMDP,
    Trajectory,
    TrajectoryBatch,
)

logger = logging.getLogger(__name__)


def _draw(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of `probs` (inverse CDF)"""
    u = rng.random(probs.shape[0])
    idx = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise ModelValidationError(f"gamma must lie in (0, 1], got {gamma}")


def sample_batch(
    pomdp: TabularPOMDP,
    behavior: Optional[BehaviorPolicy],
    n: int,
    seed: int,
    with_hidden: bool = False,
    eval_policy: Optional[EvalPolicy] = None,
    switch_t: int = 1,
) -> TrajectoryBatch:
    """
    Sample n episodes.

    Actions A_1..A_{switch_t - 1} are taken by `eval_policy`, the rest by the
    logging policy, so switch_t = 1 samples P_b and switch_t = H + 1 samples
    P_e. The prior action A_0 always follows the model's prior action law.
    """
    H, S = pomdp.horizon, pomdp.n_states
    if n < 1:
        raise ModelValidationError(f"need n >= 1 trajectories, got {n}")
    if not 1 <= switch_t <= H + 1:
        raise ModelValidationError(f"switch_t must lie in 1..{H + 1}, got {switch_t}")
    if switch_t > 1 and eval_policy is None:
        raise ModelValidationError("switch_t > 1 needs an evaluation policy")
    if switch_t <= H:
        if behavior is None:
            raise ModelValidationError("logging policy required for steps after the switch")
        behavior.check_compatible(pomdp)

    rng = np.random.default_rng(seed)
    states = np.empty((n, H + 1), dtype=int)
    observations = np.empty((n, H + 1), dtype=int)
    actions = np.empty((n, H), dtype=int)
    rewards = np.empty((n, H), dtype=float)

    s = _draw(rng, np.broadcast_to(pomdp.prior_state, (n, S)))
    states[:, 0] = s
    observations[:, 0] = _draw(rng, pomdp.emission_at(0)[s])
    prior_actions = _draw(rng, pomdp.prior_action[s])
    s = _draw(rng, pomdp.transition_at(0)[s, prior_actions])

    for t in range(1, H + 1):
        states[:, t] = s
        observations[:, t] = _draw(rng, pomdp.emission_at(t)[s])
        if t < switch_t:
            a = eval_policy.act_batch(observations[:, 1:t + 1], actions[:, :t - 1])
        else:
            a = _draw(rng, behavior.probs_at(t)[s])
        actions[:, t - 1] = a
        rewards[:, t - 1] = pomdp.reward_at(t)[s, a]
        if t < H:
            s = _draw(rng, pomdp.transition_at(t)[s, a])

    return TrajectoryBatch(
        observations,
        actions,
        rewards,
        states if with_hidden else None,
        prior_actions if with_hidden else None,
    )


def sample_trajectory(
    pomdp: TabularPOMDP,
    behavior: BehaviorPolicy,
    rng_seed: int,
    with_hidden: bool = False,
) -> Trajectory:
    return sample_batch(pomdp, behavior, 1, rng_seed, with_hidden=with_hidden).to_trajectories()[0]


def rollout_returns(
    pomdp: TabularPOMDP,
    eval_policy: EvalPolicy,
    gamma: float,
    n: int,
    seed: int,
) -> np.ndarray:
    """Discounted returns of n Monte-Carlo episodes run entirely by the target policy"""
    _check_gamma(gamma)
    batch = sample_batch(pomdp, None, n, seed, eval_policy=eval_policy, switch_t=pomdp.horizon + 1)
    return batch.discounted_returns(gamma)


# ============================================
# ENUMERATION
# ============================================

def _guard(path_count: int, budget: int) -> None:
    if path_count > budget:
        raise EnumerationTooLarge(path_count, budget)


def law_path_bound(pomdp: TabularPOMDP, switch_t: int) -> int:
    """Worst-case number of (s_0, o_0, a_0, s_1..s_H, o_1..o_H, a_1..a_H) paths"""
    S, A, O, H = pomdp.n_states, pomdp.n_actions, pomdp.n_obs, pomdp.horizon
    free_actions = H - (switch_t - 1)
    return (S ** (H + 1)) * (O ** (H + 1)) * (A ** (1 + free_actions))


def enumerate_paths(
    pomdp: TabularPOMDP,
    behavior: Optional[BehaviorPolicy],
    eval_policy: Optional[EvalPolicy],
    switch_t: int,
    budget: int = ENUMERATION_BUDGET,
) -> Iterator[Tuple[Trajectory, float]]:
    """
    Yield every positive-probability path with its exact probability.

    Paths carry their hidden component; actions before `switch_t` are forced
    by `eval_policy`, later ones follow the logging policy.
    """
    H = pomdp.horizon
    if not 1 <= switch_t <= H + 1:
        raise ModelValidationError(f"switch_t must lie in 1..{H + 1}, got {switch_t}")
    if switch_t > 1 and eval_policy is None:
        raise ModelValidationError("switch_t > 1 needs an evaluation policy")
    if switch_t <= H:
        if behavior is None:
            raise ModelValidationError("logging policy required for steps after the switch")
        behavior.check_compatible(pomdp)
    _guard(law_path_bound(pomdp, switch_t), budget)

    def action_law(t: int, s: int, steps: Tuple[Step, ...], o: int) -> np.ndarray:
        if t < switch_t:
            forced = eval_policy.act(tuple(st.o for st in steps) + (o,), tuple(st.a for st in steps))
            law = np.zeros(pomdp.n_actions)
            law[forced] = 1.0
            return law
        return behavior.probs_at(t)[s]

    def extend(t, s, steps, states, head, prob):
        emission = pomdp.emission_at(t)[s]
        for o in np.flatnonzero(emission):
            p_o = prob * emission[o]
            law = action_law(t, s, steps, int(o))
            for a in np.flatnonzero(law):
                p_a = p_o * law[a]
                path = steps + (Step(int(o), int(a), float(pomdp.reward_at(t)[s, a])),)
                if t == H:
                    s0, o0, a0 = head
                    yield Trajectory(o0, path, HiddenPath(s0, a0, states)), p_a
                    continue
                successors = pomdp.transition_at(t)[s, a]
                for s_next in np.flatnonzero(successors):
                    yield from extend(t + 1, int(s_next), path, states + (int(s_next),),
                                      head, p_a * successors[s_next])

    for s0 in np.flatnonzero(pomdp.prior_state):
        p0 = pomdp.prior_state[s0]
        emission = pomdp.emission_at(0)[s0]
        for o0 in np.flatnonzero(emission):
            for a0 in np.flatnonzero(pomdp.prior_action[s0]):
                p_head = p0 * emission[o0] * pomdp.prior_action[s0, a0]
                successors = pomdp.transition_at(0)[s0, a0]
                for s1 in np.flatnonzero(successors):
                    yield from extend(1, int(s1), (), (int(s1),),
                                      (int(s0), int(o0), int(a0)), p_head * successors[s1])


def exact_policy_value(
    pomdp: TabularPOMDP,
    eval_policy: EvalPolicy,
    gamma: float,
    budget: int = ENUMERATION_BUDGET,
) -> float:
    """v_gamma(pi_e) = sum_t gamma^(t-1) E_e[R_t] by summing over all state/observation paths"""
    _check_gamma(gamma)
    S, A, O, H = pomdp.n_states, pomdp.n_actions, pomdp.n_obs, pomdp.horizon
    # O_0 cannot influence the target policy, so it is marginalized out
    _guard((S ** (H + 1)) * (O ** H) * A, budget)

    def value_from(t: int, s: int, obs_hist: Tuple[int, ...], act_hist: Tuple[int, ...]) -> float:
        emission = pomdp.emission_at(t)[s]
        total = 0.0
        for o in np.flatnonzero(emission):
            hist = obs_hist + (int(o),)
            a = eval_policy.act(hist, act_hist)
            branch = gamma ** (t - 1) * pomdp.reward_at(t)[s, a]
            if t < H:
                successors = pomdp.transition_at(t)[s, a]
                for s_next in np.flatnonzero(successors):
                    branch += successors[s_next] * value_from(t + 1, int(s_next), hist, act_hist + (a,))
            total += emission[o] * branch
        return total

    first = pomdp.first_state_law()
    value = sum(first[s1] * value_from(1, int(s1), (), ()) for s1 in np.flatnonzero(first))
    return float(value)
