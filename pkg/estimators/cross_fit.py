"""
CROSS FIT - plug-in policy-value estimation with out-of-fold nuisances

Fold k's bridge functions are fit on every other fold and scored on fold k;
the estimate is the mean of the stitched scores and the variance is the
plug-in empirical variance of those scores.
"""

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError
from scipy.stats import norm
from sklearn.model_selection import KFold

from config import DEFAULT_K_FOLDS, VmmConfig
from errors import FoldFailed, NonStandardFoldingWarning, ProximalOpeError
from estimators.scores import ScoreKind, eta_matrix, score_batch
from nuisance.kernels import KernelSpec
from nuisance.sequential_vmm import NuisanceSet, fit_nuisances_table
from reduction.pci_schemes import ControlTable, PciScheme, build_control_table
from simulation.tabular_pomdp import Alphabets, EvalPolicy, as_batch

logger = logging.getLogger(__name__)

Z_95 = float(norm.ppf(0.975))


@dataclass
class EstimateReport:
    estimate: float
    fold_estimates: List[float]
    sigma2: float
    ci95: Tuple[float, float]
    n: int
    score: ScoreKind
    diagnostics: Dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.ci95
        if np.isfinite(self.estimate) and not lo <= self.estimate <= hi:
            raise ValueError(f"interval {self.ci95} does not contain the estimate {self.estimate}")
        if np.isfinite(self.sigma2) and self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")

    @property
    def max_eta(self) -> float:
        return float(self.diagnostics.get("max_eta", float("nan")))

    def to_json(self) -> str:
        blob = asdict(self)
        blob["score"] = self.score.value
        return json.dumps(blob, indent=2, default=float)

    def csv_row(self, method: str, seed: int) -> dict:
        return {
            "method": method,
            "score_kind": self.score.value,
            "n": self.n,
            "seed": seed,
            "estimate": self.estimate,
            "sigma2": self.sigma2,
            "ci_lo": self.ci95[0],
            "ci_hi": self.ci95[1],
            "max_eta": self.max_eta,
            "runtime_ms": None,
        }


def assign_folds(n: int, k: int, seed: int) -> np.ndarray:
    """Fold label per index from a seeded, shuffled KFold split"""
    if k < 1:
        raise ValueError(f"k_folds must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} trajectories into {k} folds")
    labels = np.zeros(n, dtype=int)
    if k == 1:
        return labels
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    for fold, (_, test) in enumerate(splitter.split(np.arange(n))):
        labels[test] = fold
    return labels


def _fit_fold(
    table: ControlTable,
    train: np.ndarray,
    fold: int,
    config: VmmConfig,
    gamma: float,
    kernel: Optional[KernelSpec],
) -> NuisanceSet:
    try:
        return fit_nuisances_table(table.take(train), config, gamma, kernel)
    except (ProximalOpeError, LinAlgError, ValueError, FloatingPointError) as err:
        raise FoldFailed(fold, err) from err


def cross_fit_nuisances(
    table: ControlTable,
    labels: np.ndarray,
    config: VmmConfig,
    gamma: float,
    kernel: Optional[KernelSpec] = None,
    n_jobs: int = 1,
) -> List[NuisanceSet]:
    """One NuisanceSet per fold, fit on the complement (all data when k = 1)"""
    folds = np.unique(labels)
    everything = np.arange(len(table))
    train_sets = [everything if len(folds) == 1 else np.flatnonzero(labels != f) for f in folds]
    return Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(_fit_fold)(table, train, int(f), config, gamma, kernel)
        for f, train in zip(folds, train_sets)
    )


def _report(
    kind: ScoreKind,
    scores: np.ndarray,
    labels: np.ndarray,
    diagnostics: Dict,
) -> EstimateReport:
    n = scores.shape[0]
    finite = np.isfinite(scores)
    fold_estimates = [float(scores[labels == f].mean()) for f in np.unique(labels)]
    if not finite.all():
        logger.warning("%d of %d %s scores are not finite", int((~finite).sum()), n, kind.value)
        nan = float("nan")
        return EstimateReport(nan, fold_estimates, nan, (nan, nan), n, kind, diagnostics)
    estimate = float(scores.mean())
    sigma2 = float(np.mean((scores - estimate) ** 2))
    half = Z_95 * np.sqrt(sigma2 / n)
    return EstimateReport(estimate, fold_estimates, sigma2, (estimate - half, estimate + half), n, kind, diagnostics)


def estimate_values(
    data,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    config: VmmConfig,
    gamma: float,
    kinds: Iterable[ScoreKind] = (ScoreKind.DR,),
    k_folds: int = DEFAULT_K_FOLDS,
    *,
    alphabets: Optional[Alphabets] = None,
    seed: int = 0,
    folds: Optional[Sequence[int]] = None,
    n_jobs: int = 1,
    kernel: Optional[KernelSpec] = None,
) -> Dict[ScoreKind, EstimateReport]:
    """
    Cross-fitted estimates for several score kinds sharing the same fits.

    `folds` overrides the seeded split with explicit labels; permuting the
    data together with its labels reproduces the estimate.
    """
    kinds = [ScoreKind(k) for k in kinds]
    batch = as_batch(data)
    n_obs = alphabets.n_obs if alphabets is not None else int(batch.observations.max()) + 1
    table = build_control_table(batch, eval_policy, scheme, n_obs)
    n = len(table)

    if folds is None:
        labels = assign_folds(n, k_folds, seed)
    else:
        labels = np.asarray(folds, dtype=int)
        if labels.shape != (n,):
            raise ValueError(f"fold labels have shape {labels.shape}, expected ({n},)")
    k = len(np.unique(labels))
    if k == 1:
        warnings.warn("k_folds=1: nuisances are fit and scored on the same data", NonStandardFoldingWarning)
        logger.warning("no cross-fitting (k_folds=1); scores are in-sample")

    fits = cross_fit_nuisances(table, labels, config, gamma, kernel, n_jobs)

    scores = {kind: np.empty(n) for kind in kinds}
    max_eta = 0.0
    unseen = 0
    for fold, nuisances in zip(np.unique(labels), fits):
        held_out = np.flatnonzero(labels == fold)
        part = table.take(held_out)
        before = nuisances.unseen_lookups()
        dr = score_batch(part, nuisances, gamma, ScoreKind.DR)
        # one DR pass touches every lookup the other kinds make
        unseen += nuisances.unseen_lookups() - before
        for kind in kinds:
            scores[kind][held_out] = dr if kind == ScoreKind.DR else score_batch(part, nuisances, gamma, kind)
        max_eta = max(max_eta, float(np.nanmax(np.abs(eta_matrix(part, nuisances)))))
    if unseen and k > 1:
        logger.warning("%d lookups hit (control, action) pairs unseen in their training folds", unseen)

    diagnostics = {
        "max_eta": max_eta,
        "matched_share": table.matched.mean(axis=0).tolist(),
        "unseen_lookups": unseen,
        "cross_fitted": k > 1,
        "k_folds": k,
        "fold_labels": labels.tolist(),
        "scheme": scheme.label,
    }
    reports = {}
    for kind in kinds:
        extra = dict(diagnostics, nonfinite_scores=int((~np.isfinite(scores[kind])).sum()))
        reports[kind] = _report(kind, scores[kind], labels, extra)
    return reports


def estimate_value(
    data,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    config: VmmConfig,
    gamma: float,
    kind: ScoreKind = ScoreKind.DR,
    k_folds: int = DEFAULT_K_FOLDS,
    **kwargs,
) -> EstimateReport:
    kind = ScoreKind(kind)
    return estimate_values(data, eval_policy, scheme, config, gamma, (kind,), k_folds, **kwargs)[kind]
