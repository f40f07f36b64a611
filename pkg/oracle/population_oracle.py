"""
POPULATION ORACLE - exact laws, exact bridge functions, exact expectations

Enumerates the trajectory law P^(t) (target policy for the first t-1
actions, logging policy afterwards; P_b = P^(1), P_e = P^(H+1)) and solves
the bridge equations on the enumerated probabilities:

    q^(t):  E^(t)[q(Z_t, A_t) | W_t, A_t = a] = 1 / P^(t)(A_t = a | W_t)
    h^(t):  E^(t)[h(W_t, A_t) | Z_t, A_t = a] = E^(t)[1{A_t = E_t} Y_t | Z_t, A_t = a]

Every equation is a finite linear system over tabular values, solved in the
minimum-norm least-squares sense; a residual above SOLVE_TOL means no exact
bridge exists for this model and scheme.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import ENUMERATION_BUDGET
from errors import ModelValidationError, NoSolution, ZeroPropensity
from estimators.scores import ScoreKind, eta_matrix, outcome_recursion, score_batch
from nuisance.sequential_vmm import H_DEFAULT, Q_DEFAULT, NuisanceSet
from nuisance.tabular_fn import TabularFn, unique_pairs
from reduction.pci_schemes import ControlTable, PciScheme, build_control_table, control_columns
from simulation.simulator import enumerate_paths
from simulation.tabular_pomdp import BehaviorPolicy, EvalPolicy, TabularPOMDP, Trajectory, TrajectoryBatch

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
SOLVE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class WeightedTrajectorySet:
    """(trajectory, probability) pairs of one law; switch_t says which"""

    entries: Tuple[Tuple[Trajectory, float], ...]
    switch_t: int

    def __post_init__(self):
        probs = np.array([p for _, p in self.entries], dtype=float)
        if probs.size == 0:
            raise ModelValidationError("empty trajectory law")
        if np.any(probs < 0):
            raise ModelValidationError("negative path probability")
        total = float(probs.sum())
        if abs(total - 1.0) > PROB_TOL:
            raise ModelValidationError(f"path probabilities sum to {total!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def horizon(self) -> int:
        return self.entries[0][0].horizon

    @property
    def law_tag(self) -> str:
        if self.switch_t == 1:
            return "P_b"
        if self.switch_t == self.horizon + 1:
            return "P_e"
        return f"P^({self.switch_t})"

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for _, p in self.entries], dtype=float)

    def observable(self) -> "WeightedTrajectorySet":
        """Merge paths with the same (o0, (o, a, r)_1..H); hidden parts dropped"""
        grouped: "OrderedDict[tuple, float]" = OrderedDict()
        for traj, p in self.entries:
            key = traj.observable_key()
            grouped[key] = grouped.get(key, 0.0) + p
        return WeightedTrajectorySet(
            tuple((Trajectory(o0, steps), p) for (o0, steps), p in grouped.items()),
            self.switch_t,
        )

    def to_batch(self) -> Tuple[TrajectoryBatch, np.ndarray]:
        return TrajectoryBatch.from_trajectories(t for t, _ in self.entries), self.probabilities


def enumerate_law(
    pomdp: TabularPOMDP,
    behavior: BehaviorPolicy,
    eval_policy: Optional[EvalPolicy],
    switch_t: int,
    budget: int = ENUMERATION_BUDGET,
) -> WeightedTrajectorySet:
    entries = tuple(enumerate_paths(pomdp, behavior, eval_policy, switch_t, budget))
    law = WeightedTrajectorySet(entries, switch_t)
    logger.debug("%s: %d paths", law.law_tag, len(law))
    return law


def population_expectation(
    law: WeightedTrajectorySet,
    score_fn: Callable,
    batched: bool = False,
) -> float:
    """
    sum_tau p(tau) psi(tau) over observable trajectories.

    With batched=True, `score_fn` takes a TrajectoryBatch and returns one
    value per row.
    """
    observable = law.observable()
    if batched:
        batch, probs = observable.to_batch()
        return float(probs @ np.asarray(score_fn(batch), dtype=float))
    return float(sum(p * float(score_fn(traj)) for traj, p in observable.entries))


@dataclass(frozen=True, eq=False)
class LawTable:
    """Observable law as a weighted ControlTable"""

    table: ControlTable
    probs: np.ndarray


def law_table(law: WeightedTrajectorySet, eval_policy: EvalPolicy, scheme: PciScheme, n_obs: int) -> LawTable:
    batch, probs = law.observable().to_batch()
    return LawTable(build_control_table(batch, eval_policy, scheme, n_obs), probs)


def _solve_system(
    t: int,
    which: str,
    M: np.ndarray,
    rhs: np.ndarray,
    support,
    default: float,
) -> TabularFn:
    values, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    residual = float(np.max(np.abs(M @ values - rhs))) if rhs.size else 0.0
    if not residual <= SOLVE_TOL:
        raise NoSolution(t, which, residual)
    return TabularFn(support, values, default, {"residual": residual, "rank": int(np.linalg.matrix_rank(M))})


def _rows(cond: np.ndarray, actions: np.ndarray, n_actions: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row index (cond value, action) = position * A + action over every action"""
    values, position = np.unique(cond, return_inverse=True)
    return values, position.reshape(-1) * n_actions + actions


def q_system(
    t: int,
    z: np.ndarray,
    w: np.ndarray,
    a: np.ndarray,
    weights: np.ndarray,
    n_actions: int,
    normalize: bool,
) -> TabularFn:
    """
    Rows (w, b):  sum_i weights_i 1{W=w, A=b} q(Z_i, b) = sum_i weights_i 1{W=w}

    normalize=True divides each row by its mass, which turns the weighted
    moment into the conditional-expectation equation.
    """
    keep = weights != 0
    z, w, a, weights = z[keep], w[keep], a[keep].astype(int), weights[keep]
    support, col = unique_pairs(z, a)
    w_values, row = _rows(w, a, n_actions)
    n_rows = len(w_values) * n_actions

    M = np.zeros((n_rows, len(support)))
    np.add.at(M, (row, col), weights)
    w_mass = np.bincount(row // n_actions, weights=weights, minlength=len(w_values))
    rhs = np.repeat(w_mass, n_actions)
    row_mass = np.bincount(row, weights=weights, minlength=n_rows)

    empty = row_mass == 0
    if np.any(empty & (rhs != 0)):
        bad = np.flatnonzero(empty)[0]
        raise ZeroPropensity(t, f"action a{bad % n_actions + 1} never taken when W = {w_values[bad // n_actions]:g}")
    if normalize:
        M = M / row_mass[:, None]
        rhs = rhs / row_mass
    return _solve_system(t, "q", M, rhs, support, Q_DEFAULT)


def h_system(
    t: int,
    z: np.ndarray,
    w: np.ndarray,
    a: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray,
    n_actions: int,
    normalize: bool,
) -> TabularFn:
    """Rows (z, b):  sum_i weights_i 1{Z=z, A=b} h(W_i, b) = sum_i weights_i 1{Z=z, A=b} target_i"""
    keep = weights != 0
    z, w, a = z[keep], w[keep], a[keep].astype(int)
    weights, target = weights[keep], target[keep]
    support, col = unique_pairs(w, a)
    z_values, row = _rows(z, a, n_actions)
    n_rows = len(z_values) * n_actions

    M = np.zeros((n_rows, len(support)))
    np.add.at(M, (row, col), weights)
    rhs = np.bincount(row, weights=weights * target, minlength=n_rows)
    row_mass = np.bincount(row, weights=weights, minlength=n_rows)
    present = row_mass != 0
    M, rhs = M[present], rhs[present]
    if normalize:
        M = M / row_mass[present, None]
        rhs = rhs / row_mass[present]
    return _solve_system(t, "h", M, rhs, support, H_DEFAULT)


def _step_columns(table: ControlTable, t: int):
    c = t - 1
    return table.z[:, c], table.w[:, c], table.a[:, c]


def solve_oracle_q(law: WeightedTrajectorySet, t: int, scheme: PciScheme, n_actions: int) -> TabularFn:
    """Exact q^(t) from P^(t); raises NoSolution or ZeroPropensity"""
    batch, probs = law.observable().to_batch()
    z, w = control_columns(batch.observations, batch.rewards, t, scheme)
    return q_system(t, z, w, batch.actions[:, t - 1], probs, n_actions, normalize=True)


def solve_oracle_h(
    law: WeightedTrajectorySet,
    t: int,
    scheme: PciScheme,
    y_values: np.ndarray,
    eval_policy: EvalPolicy,
    n_obs: int,
) -> TabularFn:
    """
    Exact h^(t) from P^(t). `y_values` holds Y_t for each row of
    law.observable() in order.
    """
    lt = law_table(law, eval_policy, scheme, n_obs)
    z, w, a = _step_columns(lt.table, t)
    target = lt.table.matched[:, t - 1] * np.asarray(y_values, dtype=float)
    return h_system(t, z, w, a, target, lt.probs, lt.table.n_actions, normalize=True)


def _with_placeholders(q: Sequence[Optional[TabularFn]], h: Sequence[Optional[TabularFn]]) -> NuisanceSet:
    return NuisanceSet(
        [f if f is not None else TabularFn.constant(Q_DEFAULT) for f in q],
        [f if f is not None else TabularFn.constant(H_DEFAULT) for f in h],
    )


def solve_oracle_nuisances(
    pomdp: TabularPOMDP,
    behavior: BehaviorPolicy,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    gamma: float,
    budget: int = ENUMERATION_BUDGET,
) -> NuisanceSet:
    """q^(1..H) forward, then h^(H..1) backward, each on its own law P^(t)"""
    H, A = pomdp.horizon, pomdp.n_actions
    tables = [
        law_table(enumerate_law(pomdp, behavior, eval_policy, t, budget), eval_policy, scheme, pomdp.n_obs)
        for t in range(1, H + 1)
    ]
    q: List[Optional[TabularFn]] = []
    for t, lt in enumerate(tables, 1):
        z, w, a = _step_columns(lt.table, t)
        q.append(q_system(t, z, w, a, lt.probs, A, normalize=True))

    h: List[Optional[TabularFn]] = [None] * H
    for t in range(H, 0, -1):
        lt = tables[t - 1]
        y = outcome_recursion(lt.table, _with_placeholders(q, h), t, gamma)
        z, w, a = _step_columns(lt.table, t)
        h[t - 1] = h_system(t, z, w, a, lt.table.matched[:, t - 1] * y, lt.probs, A, normalize=True)

    diagnostics = {
        "q_residuals": [f.diagnostics["residual"] for f in q],
        "h_residuals": [f.diagnostics["residual"] for f in h],
        "source": "conditional",
    }
    return NuisanceSet(list(q), list(h), diagnostics)


def solve_from_moments(
    pomdp: TabularPOMDP,
    behavior: BehaviorPolicy,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    gamma: float,
    budget: int = ENUMERATION_BUDGET,
    logging_table: Optional[LawTable] = None,
) -> NuisanceSet:
    """
    The same nuisances from the eta-weighted moments of the logging law alone:

        E_b[eta_t (g(W,A) q(Z,A) - sum_a g(W,a))] = 0
        E_b[eta_t (h(W,A) - 1{A=E} Y_t) g(Z,A)]   = 0

    for every tabular indicator g. `logging_table` reuses an already
    enumerated logging law.
    """
    H, A = pomdp.horizon, pomdp.n_actions
    lt = logging_table or law_table(enumerate_law(pomdp, behavior, None, 1, budget), eval_policy, scheme, pomdp.n_obs)
    table, probs = lt.table, lt.probs

    q: List[Optional[TabularFn]] = [None] * H
    for t in range(1, H + 1):
        eta = eta_matrix(table, _with_placeholders(q, [None] * H))[:, t - 1]
        z, w, a = _step_columns(table, t)
        q[t - 1] = q_system(t, z, w, a, probs * eta, A, normalize=False)

    h: List[Optional[TabularFn]] = [None] * H
    etas = eta_matrix(table, _with_placeholders(q, h))
    for t in range(H, 0, -1):
        y = outcome_recursion(table, _with_placeholders(q, h), t, gamma)
        z, w, a = _step_columns(table, t)
        h[t - 1] = h_system(t, z, w, a, table.matched[:, t - 1] * y, probs * etas[:, t - 1], A, normalize=False)

    diagnostics = {
        "q_residuals": [f.diagnostics["residual"] for f in q],
        "h_residuals": [f.diagnostics["residual"] for f in h],
        "source": "moments",
    }
    return NuisanceSet(list(q), list(h), diagnostics)


def moment_residuals(lt: LawTable, nuisances: NuisanceSet, gamma: float) -> Dict[str, List[float]]:
    """
    Per step, the largest eta-weighted logging-law moment violation over
    tabular indicator test functions, for q and for h.
    """
    table, probs = lt.table, lt.probs
    A = table.n_actions
    etas = eta_matrix(table, nuisances)
    out = {"q": [], "h": []}
    for t in range(1, table.horizon + 1):
        c = t - 1
        z, w, a = _step_columns(table, t)
        pe = probs * etas[:, c]

        w_values, row = _rows(w, a, A)
        q_vals = nuisances.q[c].lookup(z, a)
        lhs = np.bincount(row, weights=pe * q_vals, minlength=len(w_values) * A)
        rhs = np.repeat(np.bincount(row // A, weights=pe, minlength=len(w_values)), A)
        out["q"].append(float(np.max(np.abs(lhs - rhs))))

        z_values, row = _rows(z, a, A)
        y = outcome_recursion(table, nuisances, t, gamma)
        gap = nuisances.h[c].lookup(w, a) - table.matched[:, c] * y
        out["h"].append(float(np.max(np.abs(np.bincount(row, weights=pe * gap, minlength=len(z_values) * A)))))
    return out


def expected_score(lt: LawTable, nuisances: NuisanceSet, gamma: float, kind: ScoreKind) -> float:
    """E_b[psi] over an enumerated logging law"""
    return float(lt.probs @ score_batch(lt.table, nuisances, gamma, kind))


def perturbed(nuisances: NuisanceSet, direction: Tuple[List[np.ndarray], List[np.ndarray]], r: float) -> NuisanceSet:
    dq, dh = direction
    return NuisanceSet(
        [f.with_values(f.values + r * d) for f, d in zip(nuisances.q, dq)],
        [f.with_values(f.values + r * d) for f, d in zip(nuisances.h, dh)],
    )


def random_direction(nuisances: NuisanceSet, rng: np.random.Generator):
    """Uniform[-1, 1] perturbation of every support value of every bridge function"""
    dq = [rng.uniform(-1.0, 1.0, size=f.values.shape[0]) for f in nuisances.q]
    dh = [rng.uniform(-1.0, 1.0, size=f.values.shape[0]) for f in nuisances.h]
    return dq, dh


def orthogonality_derivative(
    lt: LawTable,
    nuisances: NuisanceSet,
    gamma: float,
    direction,
    r: float = 1e-4,
) -> float:
    """Central difference of E_b[psi_DR] along `direction` at r = 0"""
    plus = expected_score(lt, perturbed(nuisances, direction, r), gamma, ScoreKind.DR)
    minus = expected_score(lt, perturbed(nuisances, direction, -r), gamma, ScoreKind.DR)
    return (plus - minus) / (2.0 * r)
