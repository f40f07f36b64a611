"""
TABULAR POMDP - generative model, logging/target policies, trajectories

Time indexing follows the episode: t = 0 is the prior step (S_0, O_0, A_0)
that exists only to give the first step a previous observation, t = 1..H are
the logged steps.

Tensor layout:
- transition[t]   S_t -> S_{t+1}, t = 0..H-1 (index 0 is the prior step)
- obs_kernel[t]   S_t -> O_t,     t = 0..H
- reward[t-1]     R_t(S_t, A_t),  t = 1..H
- behavior.probs[t-1]  pi_b(A_t | S_t), t = 1..H
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import ModelValidationError

logger = logging.getLogger(__name__)

ROW_TOL = 1e-12


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_distribution(name: str, probs: np.ndarray) -> None:
    if not np.all(np.isfinite(probs)):
        raise ModelValidationError(f"{name} contains non-finite entries")
    if np.any(probs < 0):
        raise ModelValidationError(f"{name} has negative probabilities")
    worst = float(np.max(np.abs(probs.sum(axis=-1) - 1.0)))
    if worst > ROW_TOL:
        raise ModelValidationError(f"{name} rows must sum to 1 (off by {worst:.3e})")


class Alphabets(NamedTuple):
    n_states: int
    n_actions: int
    n_obs: int
    horizon: int


@dataclass(frozen=True, eq=False)
class TabularPOMDP:
    n_states: int
    n_actions: int
    n_obs: int
    horizon: int
    transition: np.ndarray
    reward: np.ndarray
    obs_kernel: np.ndarray
    prior_state: np.ndarray
    prior_action: np.ndarray
    time_homogeneous: bool = False
    r_max: Optional[float] = None

    def __post_init__(self):
        S, A, O, H = self.n_states, self.n_actions, self.n_obs, self.horizon
        if H < 1:
            raise ModelValidationError(f"horizon must be >= 1, got {H}")
        if min(S, A, O) < 1:
            raise ModelValidationError("alphabets must be nonempty")

        expected = {
            "transition": (H, S, A, S),
            "reward": (H, S, A),
            "obs_kernel": (H + 1, S, O),
            "prior_state": (S,),
            "prior_action": (S, A),
        }
        for name, shape in expected.items():
            arr = _frozen(getattr(self, name))
            if arr.shape != shape:
                raise ModelValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

        for name in ("transition", "obs_kernel", "prior_state", "prior_action"):
            _check_distribution(name, getattr(self, name))

        if not np.all(np.isfinite(self.reward)):
            raise ModelValidationError("reward contains non-finite entries")
        bound = float(np.max(np.abs(self.reward)))
        if self.r_max is None:
            object.__setattr__(self, "r_max", bound)
        elif bound > self.r_max:
            raise ModelValidationError(f"|reward| reaches {bound}, above r_max={self.r_max}")

    @classmethod
    def homogeneous(
        cls,
        transition,
        reward,
        obs_kernel,
        prior_state,
        prior_action,
        horizon: int,
    ) -> "TabularPOMDP":
        """Build a model whose kernels repeat at every step"""
        transition = np.asarray(transition, dtype=float)
        reward = np.asarray(reward, dtype=float)
        obs_kernel = np.asarray(obs_kernel, dtype=float)
        S, A, _ = transition.shape
        return cls(
            n_states=S,
            n_actions=A,
            n_obs=obs_kernel.shape[1],
            horizon=horizon,
            transition=np.repeat(transition[None], horizon, axis=0),
            reward=np.repeat(reward[None], horizon, axis=0),
            obs_kernel=np.repeat(obs_kernel[None], horizon + 1, axis=0),
            prior_state=prior_state,
            prior_action=prior_action,
            time_homogeneous=True,
        )

    @property
    def alphabets(self) -> Alphabets:
        return Alphabets(self.n_states, self.n_actions, self.n_obs, self.horizon)

    def transition_at(self, t: int) -> np.ndarray:
        return self.transition[t]

    def reward_at(self, t: int) -> np.ndarray:
        return self.reward[t - 1]

    def emission_at(self, t: int) -> np.ndarray:
        return self.obs_kernel[t]

    def first_state_law(self) -> np.ndarray:
        """Law of S_1 after the prior step"""
        joint = self.prior_state[:, None] * self.prior_action  # (S_0, A_0)
        return np.einsum("sa,sap->p", joint, self.transition[0])

    def scaled_rewards(self, factor: float) -> "TabularPOMDP":
        return replace(self, reward=np.asarray(self.reward) * factor, r_max=None)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "n_obs": self.n_obs,
            "horizon": self.horizon,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "obs_kernel": self.obs_kernel.tolist(),
            "prior_state": self.prior_state.tolist(),
            "prior_action": self.prior_action.tolist(),
            "time_homogeneous": self.time_homogeneous,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularPOMDP":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class BehaviorPolicy:
    """Logging policy acting on the hidden state: probs[t-1][s] = pi_b(. | S_t = s)"""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 3:
            raise ModelValidationError(f"behavior probs must be (H, S, A), got {probs.shape}")
        _check_distribution("behavior policy", probs)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def homogeneous(cls, table, horizon: int) -> "BehaviorPolicy":
        table = np.asarray(table, dtype=float)
        return cls(np.repeat(table[None], horizon, axis=0))

    @property
    def horizon(self) -> int:
        return self.probs.shape[0]

    def probs_at(self, t: int) -> np.ndarray:
        return self.probs[t - 1]

    def check_compatible(self, pomdp: TabularPOMDP) -> None:
        if self.probs.shape != (pomdp.horizon, pomdp.n_states, pomdp.n_actions):
            raise ModelValidationError(
                f"behavior policy shape {self.probs.shape} does not match model "
                f"{(pomdp.horizon, pomdp.n_states, pomdp.n_actions)}"
            )


class PolicyKind(str, Enum):
    CURRENT_OBS = "current_obs"
    HISTORY = "history"


# (O_1..O_t, A_1..A_{t-1}) -> one score per action
HistoryRule = Callable[[Tuple[int, ...], Tuple[int, ...]], Sequence[float]]


@dataclass(frozen=True, eq=False)
class EvalPolicy:
    """
    Deterministic target policy.

    CURRENT_OBS policies read only O_t through `table`; HISTORY policies call
    `rule` on the observable history and take the argmax of its scores, ties
    going to the lowest action index.
    """

    kind: PolicyKind
    n_actions: int
    table: Optional[np.ndarray] = None
    rule: Optional[HistoryRule] = field(default=None, compare=False)
    name: str = ""

    def __post_init__(self):
        if self.kind == PolicyKind.CURRENT_OBS:
            if self.table is None:
                raise ModelValidationError("current-observation policy needs a table")
            table = _frozen(self.table, dtype=int)
            if table.ndim != 1 or np.any(table < 0) or np.any(table >= self.n_actions):
                raise ModelValidationError(f"policy table {table.tolist()} outside action range")
            object.__setattr__(self, "table", table)
        elif self.rule is None:
            raise ModelValidationError("history policy needs a rule")

    @classmethod
    def from_table(cls, table: Sequence[int], n_actions: int, name: str = "") -> "EvalPolicy":
        return cls(PolicyKind.CURRENT_OBS, n_actions, table=np.asarray(table), name=name)

    @classmethod
    def constant(cls, action: int, n_obs: int, n_actions: int) -> "EvalPolicy":
        return cls.from_table([action] * n_obs, n_actions, name=f"constant_a{action + 1}")

    @classmethod
    def history(cls, rule: HistoryRule, n_actions: int, name: str = "") -> "EvalPolicy":
        return cls(PolicyKind.HISTORY, n_actions, rule=rule, name=name)

    @property
    def reads_history(self) -> bool:
        return self.kind == PolicyKind.HISTORY

    def act(self, observations: Sequence[int], actions: Sequence[int]) -> int:
        """Action at step t from O_1..O_t and A_1..A_{t-1}"""
        if self.kind == PolicyKind.CURRENT_OBS:
            return int(self.table[observations[-1]])
        scores = np.asarray(self.rule(tuple(int(o) for o in observations),
                                      tuple(int(a) for a in actions)), dtype=float)
        if scores.shape != (self.n_actions,):
            raise ModelValidationError(f"history rule returned {scores.shape}, expected ({self.n_actions},)")
        return int(np.argmax(scores))

    def act_batch(self, observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Row-wise `act` for observation columns O_1..O_t and action columns A_1..A_{t-1}"""
        if self.kind == PolicyKind.CURRENT_OBS:
            return self.table[observations[:, -1]]
        return np.array(
            [self.act(observations[i], actions[i]) for i in range(observations.shape[0])],
            dtype=int,
        )


class Step(NamedTuple):
    o: int
    a: int
    r: float


class HiddenPath(NamedTuple):
    s0: int
    a0: int
    states: Tuple[int, ...]  # S_1..S_H


@dataclass(frozen=True)
class Trajectory:
    o0: int
    steps: Tuple[Step, ...]
    hidden: Optional[HiddenPath] = None

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def observations(self) -> Tuple[int, ...]:
        """O_0, O_1, ..., O_H"""
        return (self.o0,) + tuple(step.o for step in self.steps)

    @property
    def actions(self) -> Tuple[int, ...]:
        return tuple(step.a for step in self.steps)

    @property
    def rewards(self) -> Tuple[float, ...]:
        return tuple(step.r for step in self.steps)

    def observable_key(self) -> tuple:
        return (self.o0, self.steps)

    def without_hidden(self) -> "Trajectory":
        return Trajectory(self.o0, self.steps)

    def validate(self, alphabets: Alphabets) -> None:
        if self.horizon != alphabets.horizon:
            raise ModelValidationError(f"trajectory length {self.horizon} != horizon {alphabets.horizon}")
        if not all(0 <= o < alphabets.n_obs for o in self.observations):
            raise ModelValidationError("observation index out of range")
        if not all(0 <= a < alphabets.n_actions for a in self.actions):
            raise ModelValidationError("action index out of range")

    def to_dict(self) -> dict:
        record = {
            "o0": int(self.o0),
            "steps": [{"o": int(s.o), "a": int(s.a), "r": float(s.r)} for s in self.steps],
        }
        if self.hidden is not None:
            record["hidden"] = {
                "s0": int(self.hidden.s0),
                "a0": int(self.hidden.a0),
                "states": [int(s) for s in self.hidden.states],
            }
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "Trajectory":
        hidden = record.get("hidden")
        return cls(
            o0=int(record["o0"]),
            steps=tuple(Step(int(s["o"]), int(s["a"]), float(s["r"])) for s in record["steps"]),
            hidden=None if hidden is None else HiddenPath(
                int(hidden["s0"]), int(hidden["a0"]), tuple(int(s) for s in hidden["states"])
            ),
        )


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Columnar view of n trajectories (the form every estimator consumes)"""

    observations: np.ndarray  # (n, H+1): O_0..O_H
    actions: np.ndarray       # (n, H):   A_1..A_H
    rewards: np.ndarray       # (n, H):   R_1..R_H
    states: Optional[np.ndarray] = None         # (n, H+1): S_0..S_H
    prior_actions: Optional[np.ndarray] = None  # (n,): A_0

    def __post_init__(self):
        object.__setattr__(self, "observations", _frozen(self.observations, dtype=int))
        object.__setattr__(self, "actions", _frozen(self.actions, dtype=int))
        object.__setattr__(self, "rewards", _frozen(self.rewards, dtype=float))
        n, H = self.actions.shape
        if self.observations.shape != (n, H + 1) or self.rewards.shape != (n, H):
            raise ModelValidationError("inconsistent trajectory batch shapes")
        if self.states is not None:
            object.__setattr__(self, "states", _frozen(self.states, dtype=int))
            object.__setattr__(self, "prior_actions", _frozen(self.prior_actions, dtype=int))

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def has_hidden(self) -> bool:
        return self.states is not None

    def take(self, indices) -> "TrajectoryBatch":
        indices = np.asarray(indices)
        return TrajectoryBatch(
            self.observations[indices],
            self.actions[indices],
            self.rewards[indices],
            None if self.states is None else self.states[indices],
            None if self.prior_actions is None else self.prior_actions[indices],
        )

    def discounted_returns(self, gamma: float) -> np.ndarray:
        discounts = gamma ** np.arange(self.horizon)
        return self.rewards @ discounts

    @classmethod
    def from_trajectories(cls, trajectories: Iterable[Trajectory]) -> "TrajectoryBatch":
        trajectories = list(trajectories)
        if not trajectories:
            raise ModelValidationError("cannot build a batch from zero trajectories")
        with_hidden = all(tr.hidden is not None for tr in trajectories)
        return cls(
            observations=[tr.observations for tr in trajectories],
            actions=[tr.actions for tr in trajectories],
            rewards=[tr.rewards for tr in trajectories],
            states=[(tr.hidden.s0,) + tr.hidden.states for tr in trajectories] if with_hidden else None,
            prior_actions=[tr.hidden.a0 for tr in trajectories] if with_hidden else None,
        )

    def to_trajectories(self) -> List[Trajectory]:
        out = []
        for i in range(len(self)):
            steps = tuple(
                Step(int(o), int(a), float(r))
                for o, a, r in zip(self.observations[i, 1:], self.actions[i], self.rewards[i])
            )
            hidden = None
            if self.states is not None:
                hidden = HiddenPath(
                    int(self.states[i, 0]),
                    int(self.prior_actions[i]),
                    tuple(int(s) for s in self.states[i, 1:]),
                )
            out.append(Trajectory(int(self.observations[i, 0]), steps, hidden))
        return out


def as_batch(data) -> TrajectoryBatch:
    """Accept a batch or any iterable of trajectories"""
    if isinstance(data, TrajectoryBatch):
        return data
    return TrajectoryBatch.from_trajectories(data)


# ============================================
# SCENARIOS
# ============================================

@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    pomdp: TabularPOMDP
    behavior: BehaviorPolicy
    policies: Dict[str, EvalPolicy]
    eps_noise: float

    def policy(self, name: str) -> EvalPolicy:
        try:
            return self.policies[name]
        except KeyError:
            raise ModelValidationError(
                f"unknown policy {name!r} for {self.name}; choose from {sorted(self.policies)}"
            ) from None


def noisy_emission(n_obs: int, eps_noise: float) -> np.ndarray:
    """Correct observation with prob 1 - eps, the others share eps evenly"""
    if not 0.0 <= eps_noise <= 1.0:
        raise ModelValidationError(f"eps_noise must lie in [0, 1], got {eps_noise}")
    if n_obs == 1:
        return np.ones((1, 1))
    kernel = np.full((n_obs, n_obs), eps_noise / (n_obs - 1))
    np.fill_diagonal(kernel, 1.0 - eps_noise)
    return kernel


# a1 / a2 successor of s1, s2, s3
NOISYOBS_NEXT = ((1, 0, 0), (0, 2, 1))
NOISYOBS_REWARD = ((3.0, 0.0), (1.0, -2.0), (8.0, -2.0))
NOISYOBS_BEHAVIOR = ((0.8, 0.2), (0.8, 0.2), (0.2, 0.8))
NOISYOBS_PRIOR = (0.5, 0.3, 0.2)
NOISYOBS_POLICIES = {"easy": (0, 0, 1), "hard": (1, 1, 0), "optim": (0, 1, 0)}


def build_noisyobs(eps_noise: float, horizon: int = 3) -> Scenario:
    """Three-state benchmark where observations are noisy copies of the state"""
    S, A = 3, 2
    transition = np.zeros((S, A, S))
    for a, successors in enumerate(NOISYOBS_NEXT):
        for s, s_next in enumerate(successors):
            transition[s, a, s_next] = 1.0

    pomdp = TabularPOMDP.homogeneous(
        transition=transition,
        reward=NOISYOBS_REWARD,
        obs_kernel=noisy_emission(S, eps_noise),
        prior_state=NOISYOBS_PRIOR,
        prior_action=NOISYOBS_BEHAVIOR,
        horizon=horizon,
    )
    policies = {name: EvalPolicy.from_table(table, A, name=name) for name, table in NOISYOBS_POLICIES.items()}
    return Scenario("noisyobs", pomdp, BehaviorPolicy.homogeneous(NOISYOBS_BEHAVIOR, horizon), policies, eps_noise)


STICKY_SHIFT_BEHAVIOR = ((0.7, 0.3), (0.5, 0.5), (0.3, 0.7))
STICKY_SHIFT_REWARD = ((1.0, 0.0), (0.0, 2.0), (3.0, -1.0))
STICKY_SHIFT_PRIOR = (0.4, 0.35, 0.25)
STICKY_SHIFT_POLICIES = {"stay": (0, 0, 0), "shift": (1, 1, 1), "mixed": (0, 1, 0)}


def build_sticky_shift(eps_noise: float = 0.2, horizon: int = 3) -> Scenario:
    """
    Three-state benchmark with stochastic, full-rank dynamics.

    a1 keeps the state with prob 0.8 and splits the rest evenly. a2 keeps it
    with prob 0.6, advances it cyclically with prob 0.3 and skips ahead with
    prob 0.1. Every action mix gives a diagonally dominant kernel, so both
    bridge functions exist, are unique under the previous-observation
    reduction and stay bounded.
    """
    S, A = 3, 2
    transition = np.zeros((S, A, S))
    for s in range(S):
        transition[s, 0] = 0.1
        transition[s, 0, s] = 0.8
        transition[s, 1, s] = 0.6
        transition[s, 1, (s + 1) % S] = 0.3
        transition[s, 1, (s + 2) % S] = 0.1

    pomdp = TabularPOMDP.homogeneous(
        transition=transition,
        reward=STICKY_SHIFT_REWARD,
        obs_kernel=noisy_emission(S, eps_noise),
        prior_state=STICKY_SHIFT_PRIOR,
        prior_action=STICKY_SHIFT_BEHAVIOR,
        horizon=horizon,
    )
    policies = {name: EvalPolicy.from_table(table, A, name=name) for name, table in STICKY_SHIFT_POLICIES.items()}
    return Scenario("sticky_shift", pomdp, BehaviorPolicy.homogeneous(STICKY_SHIFT_BEHAVIOR, horizon), policies, eps_noise)


SCENARIO_BUILDERS = {"noisyobs": build_noisyobs, "sticky_shift": build_sticky_shift}


def build_scenario(name: str, eps_noise: float, horizon: int = 3) -> Scenario:
    try:
        builder = SCENARIO_BUILDERS[name]
    except KeyError:
        raise ModelValidationError(f"unknown scenario {name!r}") from None
    return builder(eps_noise, horizon)
