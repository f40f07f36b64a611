"""
SEQUENTIAL VMM - kernel method-of-moments estimation of the bridge functions

Forward pass: q^(1..H), each weighted by eta built from the earlier q's.
Backward pass: h^(H..1), each targeting the doubly robust backup of the
later steps. Every solve minimizes

    rho(f)' Q^{-1} rho(f) + lambda * |f|^2_{2,n}

over the tabular values of f. rho is affine in those values, so the argmin
is one symmetric positive-definite linear system.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from config import VmmConfig
from errors import SingularSystem
from nuisance.kernels import KernelSpec, embed_columns, gram
from nuisance.tabular_fn import SupportPoint, TabularFn, unique_pairs
from reduction.pci_schemes import ControlTable, PciScheme, build_control_table
from simulation.tabular_pomdp import Alphabets, EvalPolicy

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e15
Q_DEFAULT = 1.0
H_DEFAULT = 0.0


@dataclass
class NuisanceSet:
    """q^(t) and h^(t) for t = 1..H (list index t-1)"""

    q: List[TabularFn]
    h: List[TabularFn]
    diagnostics: Dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.q) != len(self.h):
            raise ValueError(f"{len(self.q)} q functions but {len(self.h)} h functions")

    @property
    def horizon(self) -> int:
        return len(self.q)

    def unseen_lookups(self) -> int:
        return sum(f.unseen_lookups for f in self.q + self.h)

    def diagnostics_json(self) -> str:
        blob = dict(self.diagnostics)
        blob["unseen_lookups"] = {
            "q": [f.unseen_lookups for f in self.q],
            "h": [f.unseen_lookups for f in self.h],
        }
        return json.dumps(blob, indent=2, default=float)


def _fn_columns(
    controls: np.ndarray,
    actions: np.ndarray,
    support: Optional[Sequence[SupportPoint]],
) -> Tuple[Tuple[SupportPoint, ...], np.ndarray]:
    """Support of the unknown function and the n x |support| indicator matrix"""
    observed, inverse = unique_pairs(controls, actions)
    if support is None:
        support = observed
        columns = np.arange(len(observed))
    else:
        support = tuple((float(c), int(a)) for c, a in support)
        index = {p: i for i, p in enumerate(support)}
        missing = [p for p in observed if p not in index]
        if missing:
            raise ValueError(f"data pairs {missing[:3]} fall outside the declared support")
        columns = np.array([index[p] for p in observed])
    indicator = np.zeros((controls.shape[0], len(support)))
    indicator[np.arange(controls.shape[0]), columns[inverse]] = 1.0
    return support, indicator


def _support_points(support: Sequence[SupportPoint]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.array([p[0] for p in support], dtype=float),
            np.array([p[1] for p in support], dtype=int))


def _solve_moment_problem(
    Q: np.ndarray,
    B: np.ndarray,
    c: np.ndarray,
    ridge: np.ndarray,
    lam: float,
    jitter: float,
    t: int,
    which: str,
    prior_values: np.ndarray,
) -> Tuple[np.ndarray, Dict[str, float]]:
    """argmin_f (Bf - c)' Q^{-1} (Bf - c) + lam * sum(ridge * f^2)"""
    Q = 0.5 * (Q + Q.T)
    try:
        q_factor = cho_factor(Q)
    except LinAlgError as e:
        raise SingularSystem(t, which, "moment covariance is not positive definite") from e

    Qi_B = cho_solve(q_factor, B)
    normal = B.T @ Qi_B + lam * np.diag(ridge)
    normal = 0.5 * (normal + normal.T)
    rhs = Qi_B.T @ c

    condition = float(np.linalg.cond(normal)) if normal.size else 1.0
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularSystem(t, which, f"normal matrix condition number {condition:.3e}")
    try:
        n_factor = cho_factor(normal)
    except LinAlgError:
        try:
            n_factor = cho_factor(normal + jitter * np.eye(normal.shape[0]))
        except LinAlgError as e:
            raise SingularSystem(t, which, "normal matrix not positive definite after jitter") from e
    values = cho_solve(n_factor, rhs)

    def objective(f: np.ndarray) -> float:
        moment = B @ f - c
        return float(moment @ cho_solve(q_factor, moment) + lam * ridge @ (f ** 2))

    diagnostics = {
        "residual": float(np.linalg.norm(normal @ values - rhs)),
        "condition_Q": float(np.linalg.cond(Q)),
        "condition_normal": condition,
        "objective": objective(values),
        "objective_prior": objective(prior_values),
        "support_size": int(B.shape[1]),
        "test_size": int(B.shape[0]),
    }
    return values, diagnostics


def _check_eta(eta: np.ndarray, n: int) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (n,):
        raise ValueError(f"eta has shape {eta.shape}, expected ({n},)")
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta weights must be finite")
    return eta


def compute_q(
    table: ControlTable,
    t: int,
    config: VmmConfig,
    prior_q: TabularFn,
    kernel: KernelSpec,
    eta: np.ndarray,
    fn_support: Optional[Sequence[SupportPoint]] = None,
) -> TabularFn:
    """
    Action bridge at step t from E_n[eta (g(W,A) q(Z,A) - sum_a g(W,a))] = 0.

    Test functions are kernel sections centred on S(W_t; A), the observed
    W_t values crossed with every action.
    """
    n, col, A = len(table), t - 1, table.n_actions
    if n < 1:
        raise ValueError("compute_q needs at least one trajectory")
    eta = _check_eta(eta, n)
    z, w, a = table.z[:, col], table.w[:, col], table.a[:, col]
    w_spec = table.w_specs[col]

    w_values = np.unique(w)
    test_points = embed_columns(np.repeat(w_values, A), np.tile(np.arange(A), len(w_values)), w_spec, A)
    data_points = embed_columns(w, a, w_spec, A)
    if kernel.bandwidth is None:
        kernel = kernel.calibrated(data_points)

    L = gram(kernel, data_points, test_points)
    L_sum = sum(gram(kernel, embed_columns(w, np.full(n, b), w_spec, A), test_points) for b in range(A))

    q_prior = prior_q.lookup(z, a)
    M = eta[:, None] * (q_prior[:, None] * L - L_sum)
    Q = M.T @ M / n + config.alpha * gram(kernel, test_points, test_points) + config.jitter * np.eye(len(test_points))

    support, indicator = _fn_columns(z, a, fn_support)
    B = (eta[:, None] * L).T @ indicator / n
    c = (eta[:, None] * L_sum).sum(axis=0) / n
    ridge = indicator.sum(axis=0) / n

    values, diagnostics = _solve_moment_problem(
        Q, B, c, ridge, config.lam, config.jitter, t, "q",
        prior_q.lookup(*_support_points(support)),
    )
    diagnostics["bandwidth"] = kernel.bandwidth
    logger.debug("q^(%d): %d support points, residual %.2e, cond(Q) %.2e",
                 t, len(support), diagnostics["residual"], diagnostics["condition_Q"])
    return TabularFn(support, values, Q_DEFAULT, diagnostics)


def compute_h(
    table: ControlTable,
    t: int,
    config: VmmConfig,
    prior_h: TabularFn,
    kernel: KernelSpec,
    eta: np.ndarray,
    mu: np.ndarray,
    fn_support: Optional[Sequence[SupportPoint]] = None,
) -> TabularFn:
    """
    Outcome bridge at step t from E_n[eta (h(W,A) - mu) g(Z,A)] = 0, where
    mu = 1{A_t = E_t}(R_t + gamma * omega_t) comes from the caller.
    """
    n, col, A = len(table), t - 1, table.n_actions
    if n < 1:
        raise ValueError("compute_h needs at least one trajectory")
    eta = _check_eta(eta, n)
    mu = np.asarray(mu, dtype=float)
    z, w, a = table.z[:, col], table.w[:, col], table.a[:, col]
    z_spec = table.z_specs[col]

    test_support, _ = unique_pairs(z, a)
    test_points = embed_columns(*_support_points(test_support), z_spec, A)
    data_points = embed_columns(z, a, z_spec, A)
    if kernel.bandwidth is None:
        kernel = kernel.calibrated(data_points)

    L = gram(kernel, data_points, test_points)
    h_prior = prior_h.lookup(w, a)
    M = eta[:, None] * L * (h_prior - mu)[:, None]
    Q = M.T @ M / n + config.alpha * gram(kernel, test_points, test_points) + config.jitter * np.eye(len(test_points))

    support, indicator = _fn_columns(w, a, fn_support)
    B = (eta[:, None] * L).T @ indicator / n
    c = (eta * mu) @ L / n
    ridge = indicator.sum(axis=0) / n

    values, diagnostics = _solve_moment_problem(
        Q, B, c, ridge, config.lam, config.jitter, t, "h",
        prior_h.lookup(*_support_points(support)),
    )
    diagnostics["bandwidth"] = kernel.bandwidth
    logger.debug("h^(%d): %d support points, residual %.2e, cond(Q) %.2e",
                 t, len(support), diagnostics["residual"], diagnostics["condition_Q"])
    return TabularFn(support, values, H_DEFAULT, diagnostics)


def forward_eta(table: ControlTable, q: Sequence[TabularFn], upto: int) -> np.ndarray:
    """eta_upto for every row: prod_{s < upto} q^(s)(Z_s, A_s) 1{A_s = E_s}"""
    eta = np.ones(len(table))
    matched = table.matched
    for s in range(1, upto):
        c = s - 1
        eta = eta * matched[:, c] * q[c].lookup(table.z[:, c], table.a[:, c])
    return eta


def dr_backup(table: ControlTable, t: int, q_next: TabularFn, h_next: TabularFn, mu_next: np.ndarray) -> np.ndarray:
    """omega_t = sum_a h^(t+1)(W_{t+1}, a) + q^(t+1)(Z_{t+1}, A_{t+1}) (mu_{t+1} - h^(t+1)(W_{t+1}, A_{t+1}))"""
    c = t  # column of step t+1
    w, a, z = table.w[:, c], table.a[:, c], table.z[:, c]
    return h_next.action_sum(w, table.n_actions) + q_next.lookup(z, a) * (mu_next - h_next.lookup(w, a))


def fit_nuisances_table(
    table: ControlTable,
    config: VmmConfig,
    gamma: float,
    kernel: Optional[KernelSpec] = None,
) -> NuisanceSet:
    if len(table) < 1:
        raise ValueError("cannot fit nuisances on an empty dataset")
    kernel = kernel or KernelSpec(config.kernel_scales)
    H = table.horizon
    matched = table.matched
    q_prior = [TabularFn.constant(Q_DEFAULT) for _ in range(H)]
    h_prior = [TabularFn.constant(H_DEFAULT) for _ in range(H)]

    for iteration in range(config.outer_iterations):
        q_hat: List[TabularFn] = []
        etas = []
        eta = np.ones(len(table))
        for t in range(1, H + 1):
            if t > 1:
                c = t - 2
                eta = eta * matched[:, c] * q_hat[c].lookup(table.z[:, c], table.a[:, c])
            etas.append(eta)
            q_hat.append(compute_q(table, t, config, q_prior[t - 1], kernel, eta))

        h_hat: List[Optional[TabularFn]] = [None] * H
        mu_next = None
        for t in range(H, 0, -1):
            col = t - 1
            omega = np.zeros(len(table)) if t == H else dr_backup(table, t, q_hat[t], h_hat[t], mu_next)
            mu = matched[:, col] * (table.r[:, col] + gamma * omega)
            h_hat[col] = compute_h(table, t, config, h_prior[col], kernel, etas[col], mu)
            mu_next = mu

        logger.debug("outer iteration %d/%d done", iteration + 1, config.outer_iterations)
        q_prior, h_prior = q_hat, h_hat

    diagnostics = {
        "q": [f.diagnostics for f in q_prior],
        "h": [f.diagnostics for f in h_prior],
        "outer_iterations": config.outer_iterations,
        "n": len(table),
    }
    return NuisanceSet(list(q_prior), list(h_prior), diagnostics)


def fit_nuisances(
    data,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    alphabets: Alphabets,
    config: VmmConfig,
    gamma: float,
    kernel: Optional[KernelSpec] = None,
) -> NuisanceSet:
    """Sequential VMM over raw trajectories"""
    table = build_control_table(data, eval_policy, scheme, alphabets.n_obs)
    return fit_nuisances_table(table, config, gamma, kernel)
