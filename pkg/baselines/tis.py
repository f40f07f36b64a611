"""
TIS - time-independent sampling estimator for tabular observations

With Z_t = O_{t-1}, W_t = O_t, X_t = O_{t+1} and Omega_t = (Z_t, W_t, X_t, A_t, R_t),
Omega_0 = X_0 = O_1:

    E_e[R_s] = E_ind[R_s prod_{t<=s} 1{A_t = E_t} rho^(t)(Z_t, A_t, X_{t-1})]
    rho^(t)(z, a, x) = (Q^(t,a))^{-1}_{z,x} / P(O_{t-1} = z, A_t = a)
    Q^(t,a)_{x,y}     = P(O_t = x | A_t = a, O_{t-1} = y)

where E_ind draws every Omega_t independently from its marginal. The
expectation is a chain over t, so it is summed with messages keyed by
X_{t-1} (and the observable history when the policy reads it) instead of
over all n^H combinations of trajectories.
"""

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import SingularQMatrixWarning
from simulation.tabular_pomdp import EvalPolicy, TrajectoryBatch, as_batch

logger = logging.getLogger(__name__)

MAX_Q_CONDITION = 1e12
NO_NEXT = -1


@dataclass(frozen=True, eq=False)
class OmegaMarginal:
    """Support and probabilities of Omega_t = (Z, W, X, A, R)"""

    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    a: np.ndarray
    r: np.ndarray
    prob: np.ndarray

    def __len__(self) -> int:
        return self.prob.shape[0]

    @classmethod
    def from_columns(cls, z, w, x, a, r, weights) -> "OmegaMarginal":
        rows = np.column_stack([z, w, x, a, r]).astype(float)
        support, inverse = np.unique(rows, axis=0, return_inverse=True)
        prob = np.bincount(inverse.reshape(-1), weights=weights, minlength=len(support))
        keep = prob > 0
        support = support[keep]
        return cls(
            support[:, 0].astype(int), support[:, 1].astype(int), support[:, 2].astype(int),
            support[:, 3].astype(int), support[:, 4], prob[keep],
        )


@dataclass
class TisNuisance:
    q_matrices: np.ndarray  # (H, A, k, k): [t-1, a, x, y] = P(O_t = x | A_t = a, O_{t-1} = y)
    rho: np.ndarray         # (H, k, A, k): [t-1, z, a, x]
    marginals: List[OmegaMarginal]
    x0: np.ndarray          # law of Omega_0 = O_1
    singular: List[Tuple[int, int]] = field(default_factory=list)
    zero_cells: int = 0

    @property
    def horizon(self) -> int:
        return self.rho.shape[0]

    @property
    def low_confidence(self) -> bool:
        return bool(self.singular)

    def rho_at(self, t: int, z: int, a: int, x: int) -> float:
        return float(self.rho[t - 1, z, a, x])


def _weights(batch: TrajectoryBatch, weights: Optional[np.ndarray]) -> np.ndarray:
    n = len(batch)
    if weights is None:
        return np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,) or np.any(weights < 0):
        raise ValueError("weights must be one non-negative value per trajectory")
    return weights / weights.sum()


def _invert(Q: np.ndarray, t: int, a: int) -> Tuple[np.ndarray, bool]:
    condition = np.linalg.cond(Q)
    if np.isfinite(condition) and condition <= MAX_Q_CONDITION:
        return np.linalg.inv(Q), False
    message = f"Q^({t},a{a + 1}) has condition number {condition:.3e}; using the pseudo-inverse"
    warnings.warn(message, SingularQMatrixWarning)
    logger.warning(message)
    return np.linalg.pinv(Q), True


def fit_tis_nuisance(
    data,
    n_obs: int,
    n_actions: int,
    weights: Optional[np.ndarray] = None,
) -> TisNuisance:
    """
    Estimate Q, rho and the Omega marginals from counts.

    `weights` turns the empirical law into a weighted one; probabilities of an
    enumerated law give the population version.
    """
    batch = as_batch(data)
    p = _weights(batch, weights)
    H, k, A = batch.horizon, n_obs, n_actions
    obs, acts = batch.observations, batch.actions

    q_matrices = np.zeros((H, A, k, k))
    rho = np.zeros((H, k, A, k))
    marginals = []
    singular = []
    zero_cells = 0
    for t in range(1, H + 1):
        z, w, a = obs[:, t - 1], obs[:, t], acts[:, t - 1]
        joint = np.zeros((k, A, k))  # [z, a, x]: P(O_{t-1} = z, A_t = a, O_t = x)
        np.add.at(joint, (z, a, w), p)
        cell = joint.sum(axis=2)  # P(O_{t-1} = z, A_t = a)
        for b in range(A):
            Q = np.divide(joint[:, b, :].T, cell[:, b], out=np.zeros((k, k)), where=cell[:, b] > 0)
            q_matrices[t - 1, b] = Q
            Q_inv, flagged = _invert(Q, t, b)
            if flagged:
                singular.append((t, b))
            positive = cell[:, b] > 0
            rho[t - 1, positive, b, :] = Q_inv[positive] / cell[positive, b][:, None]
            zero_cells += int((~positive).sum())

        x = obs[:, t + 1] if t < H else np.full(len(batch), NO_NEXT)
        marginals.append(OmegaMarginal.from_columns(z, w, x, a, batch.rewards[:, t - 1], p))

    if zero_cells:
        logger.warning("%d (O_{t-1}, A_t) cells have zero mass; their rho is set to 0", zero_cells)
    x0 = np.bincount(obs[:, 1], weights=p, minlength=k)
    return TisNuisance(q_matrices, rho, marginals, x0, singular, zero_cells)


def tis_value(nuisance: TisNuisance, eval_policy: EvalPolicy, gamma: float) -> float:
    """
    sum_s gamma^(s-1) E_ind[R_s prod_{t<=s} 1{A_t = E_t} rho^(t)(Z_t, A_t, X_{t-1})]

    messages[hist] is a vector over X_{t-1}: the P_ind mass of Omega_0..Omega_{t-1}
    times the product of the indicator/rho factors so far. `hist` holds the
    (W, A) pairs the target policy reads, empty for current-observation policies.
    """
    H = nuisance.horizon
    history = eval_policy.reads_history
    messages: Dict[tuple, np.ndarray] = {(): nuisance.x0.copy()}
    value = 0.0
    for t in range(1, H + 1):
        omega = nuisance.marginals[t - 1]
        rho_t = nuisance.rho[t - 1]
        next_messages: Dict[tuple, np.ndarray] = defaultdict(lambda: np.zeros(nuisance.x0.shape[0]))
        term = 0.0
        for hist, message in messages.items():
            observed = tuple(w for w, _ in hist)
            taken = tuple(a for _, a in hist)
            targets = np.array([eval_policy.act(observed + (int(w),), taken) for w in omega.w], dtype=int)
            matched = targets == omega.a
            if not matched.any():
                continue
            weight = omega.prob * matched * (rho_t[omega.z, omega.a, :] @ message)
            term += float(weight @ omega.r)
            if t == H:
                continue
            if history:
                for i in np.flatnonzero(matched):
                    next_messages[hist + ((int(omega.w[i]), int(omega.a[i])),)][omega.x[i]] += weight[i]
            else:
                np.add.at(next_messages[()], omega.x[matched], weight[matched])
        value += gamma ** (t - 1) * term
        messages = dict(next_messages)
    return float(value)


def tis(
    data,
    eval_policy: EvalPolicy,
    gamma: float,
    n_obs: Optional[int] = None,
    n_actions: Optional[int] = None,
    weights: Optional[np.ndarray] = None,
) -> float:
    batch = as_batch(data)
    n_obs = n_obs or int(batch.observations.max()) + 1
    n_actions = n_actions or eval_policy.n_actions
    nuisance = fit_tis_nuisance(batch, n_obs, n_actions, weights)
    return tis_value(nuisance, eval_policy, gamma)
