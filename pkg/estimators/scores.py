"""
SCORES - per-trajectory identification scores built from bridge functions

    psi_IS  = sum_t g^(t-1) eta_{t+1} R_t
    psi_Reg = sum_a h^(1)(W_1, a)
    psi_DR  = sum_t g^(t-1) (eta_{t+1} R_t + eta_t sum_a h^(t)(W_t, a)
                             - eta_t q^(t)(Z_t, A_t) h^(t)(W_t, A_t))

with eta_1 = 1 and eta_{t+1} = eta_t q^(t)(Z_t, A_t) 1{A_t = E_t}.
`score` works on one trajectory, `score_batch` on a whole ControlTable;
they agree row by row.
"""

import logging
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from nuisance.sequential_vmm import NuisanceSet
from reduction.pci_schemes import ControlTable, ControlTuple, PciScheme, control_tuples
from simulation.tabular_pomdp import EvalPolicy, Trajectory

logger = logging.getLogger(__name__)


class ScoreKind(str, Enum):
    IS = "is"
    REG = "reg"
    DR = "dr"


class NuisanceColumns(NamedTuple):
    """Bridge values along each row; all arrays are (n, H)"""

    q: np.ndarray      # q^(t)(Z_t, A_t)
    match: np.ndarray  # 1{A_t = E_t}
    h_obs: np.ndarray  # h^(t)(W_t, A_t)
    h_sum: np.ndarray  # sum_a h^(t)(W_t, a)


def _check_horizon(horizon: int, nuisances: NuisanceSet) -> None:
    if nuisances.horizon < horizon:
        raise ValueError(f"nuisances cover {nuisances.horizon} steps, data has {horizon}")


def nuisance_columns(table: ControlTable, nuisances: NuisanceSet) -> NuisanceColumns:
    _check_horizon(table.horizon, nuisances)
    n, H, A = len(table), table.horizon, table.n_actions
    q = np.empty((n, H))
    h_obs = np.empty((n, H))
    h_sum = np.empty((n, H))
    for c in range(H):
        q[:, c] = nuisances.q[c].lookup(table.z[:, c], table.a[:, c])
        h_obs[:, c] = nuisances.h[c].lookup(table.w[:, c], table.a[:, c])
        h_sum[:, c] = nuisances.h[c].action_sum(table.w[:, c], A)
    return NuisanceColumns(q, table.matched, h_obs, h_sum)


def _step(eta: np.ndarray, q: np.ndarray, matched: np.ndarray) -> np.ndarray:
    # an unmatched action zeroes the weight even when q is not finite
    return np.where(matched > 0, eta * q, 0.0)


def eta_weights(tuples: Sequence[ControlTuple], nuisances: NuisanceSet) -> np.ndarray:
    """eta_1..eta_{H+1} of one trajectory"""
    _check_horizon(len(tuples), nuisances)
    eta = np.ones(len(tuples) + 1)
    for c, d in enumerate(tuples):
        q = nuisances.q[c](d.z.value, d.a)
        eta[c + 1] = eta[c] * q if d.a == d.e else 0.0
    return eta


def eta_matrix(table: ControlTable, nuisances: NuisanceSet, columns: NuisanceColumns = None) -> np.ndarray:
    """(n, H+1) matrix whose column t-1 is eta_t"""
    columns = columns or nuisance_columns(table, nuisances)
    eta = np.ones((len(table), table.horizon + 1))
    for c in range(table.horizon):
        eta[:, c + 1] = _step(eta[:, c], columns.q[:, c], columns.match[:, c])
    return eta


def outcome_recursion(table: ControlTable, nuisances: NuisanceSet, t: int, gamma: float) -> np.ndarray:
    """
    Y_t for every row: Y_H = R_H and
    Y_{s-1} = R_{s-1} + g (sum_a h^(s)(W_s, a) + q^(s)(Z_s, A_s) (1{A_s = E_s} Y_s - h^(s)(W_s, A_s))).

    Only the bridge functions of steps t+1..H are read.
    """
    H = table.horizon
    if not 1 <= t <= H:
        raise ValueError(f"step t={t} outside 1..{H}")
    _check_horizon(H, nuisances)
    A = table.n_actions
    y = table.r[:, H - 1].astype(float)
    for s in range(H, t, -1):
        c = s - 1
        q = nuisances.q[c].lookup(table.z[:, c], table.a[:, c])
        h_obs = nuisances.h[c].lookup(table.w[:, c], table.a[:, c])
        h_sum = nuisances.h[c].action_sum(table.w[:, c], A)
        matched = table.matched[:, c]
        y = table.r[:, c - 1] + gamma * (h_sum + q * (matched * y - h_obs))
    return y


def score_batch(table: ControlTable, nuisances: NuisanceSet, gamma: float, kind: ScoreKind) -> np.ndarray:
    kind = ScoreKind(kind)
    columns = nuisance_columns(table, nuisances)
    if kind == ScoreKind.REG:
        return columns.h_sum[:, 0].copy()

    eta = eta_matrix(table, nuisances, columns)
    discounts = gamma ** np.arange(table.horizon)
    weighted_rewards = eta[:, 1:] * table.r
    if kind == ScoreKind.IS:
        return weighted_rewards @ discounts
    correction = eta[:, :-1] * (columns.h_sum - columns.q * columns.h_obs)
    return (weighted_rewards + correction) @ discounts


def score(
    traj: Trajectory,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    nuisances: NuisanceSet,
    gamma: float,
    kind: ScoreKind,
) -> float:
    """psi of a single trajectory"""
    kind = ScoreKind(kind)
    tuples = control_tuples(traj, eval_policy, scheme)
    _check_horizon(len(tuples), nuisances)
    A = eval_policy.n_actions

    def h_sum(c: int, d: ControlTuple) -> float:
        return sum(nuisances.h[c](d.w.value, a) for a in range(A))

    if kind == ScoreKind.REG:
        return float(h_sum(0, tuples[0]))

    eta = eta_weights(tuples, nuisances)
    total = 0.0
    for c, d in enumerate(tuples):
        term = eta[c + 1] * d.r
        if kind == ScoreKind.DR:
            term += eta[c] * (h_sum(c, d) - nuisances.q[c](d.z.value, d.a) * nuisances.h[c](d.w.value, d.a))
        total += gamma ** c * term
    return float(total)
