"""
PCI SCHEMES - negative-control reductions of observed trajectories

A scheme picks, for each step t, an action-side control Z_t and an
outcome-side control W_t out of the observable history. Control values are
tagged (observation index, reward, or one view of a split observation) so
kernels and tabular supports handle every scheme the same way.

Validity of a (scheme, target policy) pair is a property of the environment
and is not checked here; the population oracle is where it gets tested.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import SchemeInapplicable
from simulation.tabular_pomdp import EvalPolicy, Trajectory, TrajectoryBatch, as_batch

logger = logging.getLogger(__name__)


class SchemeKind(str, Enum):
    PREV_OBS = "prev_obs"
    K_PREV_OBS = "k_prev_obs"
    INITIAL_OBS = "initial_obs"
    TWO_VIEWS = "two_views"
    PREV_REWARD = "prev_reward"


SCHEME_NOTES = {
    SchemeKind.PREV_OBS: "Z_t = O_{t-1}, W_t = O_t; valid when the target policy reads only O_t",
    SchemeKind.K_PREV_OBS: "Z_t = O_{t-k}, W_t = O_t; valid when the target policy ignores the last k observations before O_t",
    SchemeKind.INITIAL_OBS: "Z_t = O_0, W_t = O_t; valid when O_0 influences nothing but the first state",
    SchemeKind.TWO_VIEWS: "Z_t = O_t'', W_t = O_t'; valid when the two views are conditionally independent given S_t and the target policy reads only O_t'",
    SchemeKind.PREV_REWARD: "Z_t = R_{t-1} (Z_1 = O_0), W_t = O_t; valid when rewards carry no information the target policy uses",
}


class ControlKind(str, Enum):
    OBS = "obs"
    REWARD = "reward"
    VIEW = "view"


class ControlValue(NamedTuple):
    kind: ControlKind
    value: float  # category index for OBS / VIEW, raw reward for REWARD


@dataclass(frozen=True)
class ControlSpec:
    kind: ControlKind
    size: int  # one-hot width (1 for rewards, embedded raw)

    def wrap(self, value: float) -> ControlValue:
        return ControlValue(self.kind, float(value))


@dataclass(frozen=True)
class ObservationSplit:
    """TwoViews map: observation o -> (first[o], second[o]) with their alphabet sizes"""

    first: Tuple[int, ...]
    second: Tuple[int, ...]
    n_first: int
    n_second: int

    def __post_init__(self):
        if len(self.first) != len(self.second):
            raise SchemeInapplicable("split map views must cover the same observations")
        if any(not 0 <= v < self.n_first for v in self.first) or any(
            not 0 <= v < self.n_second for v in self.second
        ):
            raise SchemeInapplicable("split map value outside its view alphabet")


@dataclass(frozen=True)
class PciScheme:
    kind: SchemeKind
    k: int = 1
    split: Optional[ObservationSplit] = None

    def __post_init__(self):
        if self.kind == SchemeKind.K_PREV_OBS and self.k < 1:
            raise SchemeInapplicable(f"k_prev_obs needs k >= 1, got {self.k}")
        if self.kind == SchemeKind.TWO_VIEWS and self.split is None:
            raise SchemeInapplicable("two_views needs an observation split map")

    @property
    def notes(self) -> str:
        return SCHEME_NOTES[self.kind]

    @property
    def label(self) -> str:
        if self.kind == SchemeKind.K_PREV_OBS:
            return f"k_prev_obs:{self.k}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str, split: Optional[ObservationSplit] = None) -> "PciScheme":
        """Parse "prev_obs" | "k_prev_obs:<k>" | "initial_obs" | "prev_reward" | "two_views" """
        name, _, arg = text.strip().partition(":")
        try:
            kind = SchemeKind(name)
        except ValueError:
            raise SchemeInapplicable(
                f"unknown scheme {text!r}; choose from {[k.value for k in SchemeKind]}"
            ) from None
        if kind == SchemeKind.K_PREV_OBS:
            try:
                return cls(kind, k=int(arg))
            except ValueError:
                raise SchemeInapplicable(f"k_prev_obs needs an integer k, got {arg!r}") from None
        if arg:
            raise SchemeInapplicable(f"scheme {name} takes no argument")
        return cls(kind, split=split)

    def control_kinds(self, t: int) -> Tuple[ControlKind, ControlKind]:
        if self.kind == SchemeKind.TWO_VIEWS:
            return ControlKind.VIEW, ControlKind.VIEW
        if self.kind == SchemeKind.PREV_REWARD and t >= 2:
            return ControlKind.REWARD, ControlKind.OBS
        return ControlKind.OBS, ControlKind.OBS

    def control_specs(self, t: int, n_obs: int) -> Tuple[ControlSpec, ControlSpec]:
        """(Z_t spec, W_t spec)"""
        z_kind, w_kind = self.control_kinds(t)
        if self.kind == SchemeKind.TWO_VIEWS:
            return ControlSpec(z_kind, self.split.n_second), ControlSpec(w_kind, self.split.n_first)
        z_size = 1 if z_kind == ControlKind.REWARD else n_obs
        return ControlSpec(z_kind, z_size), ControlSpec(w_kind, n_obs)


def _check_step(t: int, horizon: int) -> None:
    if not 1 <= t <= horizon:
        raise SchemeInapplicable(f"step t={t} outside 1..{horizon}")


def control_columns(
    observations: np.ndarray,
    rewards: np.ndarray,
    t: int,
    scheme: PciScheme,
) -> Tuple[np.ndarray, np.ndarray]:
    """Z_t and W_t for every row, from observables only"""
    o_t = observations[:, t]
    if scheme.kind == SchemeKind.PREV_OBS:
        z = observations[:, t - 1]
    elif scheme.kind == SchemeKind.K_PREV_OBS:
        z = observations[:, max(t - scheme.k, 0)]
    elif scheme.kind == SchemeKind.INITIAL_OBS:
        z = observations[:, 0]
    elif scheme.kind == SchemeKind.PREV_REWARD:
        z = observations[:, 0] if t == 1 else rewards[:, t - 2]
    else:
        z = np.asarray(scheme.split.second)[o_t]
        o_t = np.asarray(scheme.split.first)[o_t]
    return z.astype(float), o_t.astype(float)


def reduce(traj: Trajectory, t: int, scheme: PciScheme) -> Tuple[ControlValue, ControlValue]:
    """(Z_t, W_t) of one trajectory"""
    _check_step(t, traj.horizon)
    z, w = control_columns(np.array([traj.observations]), np.array([traj.rewards]), t, scheme)
    z_kind, w_kind = scheme.control_kinds(t)
    return ControlValue(z_kind, float(z[0])), ControlValue(w_kind, float(w[0]))


def eval_action(eval_policy: EvalPolicy, traj: Trajectory, t: int) -> int:
    """E_t: what the target policy would do given O_1..O_t and A_1..A_{t-1}"""
    _check_step(t, traj.horizon)
    return eval_policy.act(traj.observations[1:t + 1], traj.actions[:t - 1])


@dataclass(frozen=True)
class ControlTuple:
    """D_t = (Z_t, W_t, A_t, E_t, R_t)"""

    z: ControlValue
    w: ControlValue
    a: int
    e: int
    r: float


def control_tuples(traj: Trajectory, eval_policy: EvalPolicy, scheme: PciScheme) -> List[ControlTuple]:
    tuples = []
    for t in range(1, traj.horizon + 1):
        z, w = reduce(traj, t, scheme)
        tuples.append(ControlTuple(z, w, traj.actions[t - 1], eval_action(eval_policy, traj, t), traj.rewards[t - 1]))
    return tuples


@dataclass(frozen=True, eq=False)
class ControlTable:
    """
    Columnar D_1..D_H for n trajectories; column t-1 holds step t.

    Z and W columns are stored as floats (category index or reward), with
    one ControlSpec per step telling how to read them.
    """

    z: np.ndarray
    w: np.ndarray
    a: np.ndarray
    e: np.ndarray
    r: np.ndarray
    z_specs: Tuple[ControlSpec, ...]
    w_specs: Tuple[ControlSpec, ...]
    n_actions: int

    def __len__(self) -> int:
        return self.a.shape[0]

    @property
    def horizon(self) -> int:
        return self.a.shape[1]

    @property
    def matched(self) -> np.ndarray:
        """1{A_t = E_t} as floats"""
        return (self.a == self.e).astype(float)

    def take(self, indices) -> "ControlTable":
        indices = np.asarray(indices)
        return ControlTable(
            self.z[indices], self.w[indices], self.a[indices], self.e[indices], self.r[indices],
            self.z_specs, self.w_specs, self.n_actions,
        )

    def tuples(self, i: int) -> List[ControlTuple]:
        return [
            ControlTuple(
                self.z_specs[c].wrap(self.z[i, c]),
                self.w_specs[c].wrap(self.w[i, c]),
                int(self.a[i, c]),
                int(self.e[i, c]),
                float(self.r[i, c]),
            )
            for c in range(self.horizon)
        ]


def build_control_table(
    data,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    n_obs: int,
) -> ControlTable:
    """Vectorized control_tuples over a whole dataset"""
    batch: TrajectoryBatch = as_batch(data)
    n, H = len(batch), batch.horizon
    z = np.empty((n, H))
    w = np.empty((n, H))
    e = np.empty((n, H), dtype=int)
    z_specs, w_specs = [], []
    for t in range(1, H + 1):
        z[:, t - 1], w[:, t - 1] = control_columns(batch.observations, batch.rewards, t, scheme)
        e[:, t - 1] = eval_policy.act_batch(batch.observations[:, 1:t + 1], batch.actions[:, :t - 1])
        z_spec, w_spec = scheme.control_specs(t, n_obs)
        z_specs.append(z_spec)
        w_specs.append(w_spec)
    return ControlTable(
        z, w, batch.actions.copy(), e, batch.rewards.copy(),
        tuple(z_specs), tuple(w_specs), eval_policy.n_actions,
    )
