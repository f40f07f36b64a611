"""
EXPERIMENT RUNNER - seeded replication loops, method dispatch and artifacts

run():     truth once by enumeration, then for every (n, rep) sample a logged
           dataset and run each requested method; writes raw.csv, summary.csv,
           timings.csv and manifest.json
verify():  identification certificates for the configured scenario
truth():   exact policy values
sample():  JSON-lines trajectories from the logging policy

Replications run in a joblib pool; results come back in task order so the
raw CSV is identical for identical configs.
"""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError

from baselines.mdp_model import mdp_dp
from baselines.mean_reward import mean_r
from baselines.tis import tis
from config import LIBRARY_VERSION, PRL_THREADS, ExperimentConfig, ensure_output_dir
from errors import ProximalOpeError
from estimators.cross_fit import Z_95, estimate_values
from estimators.scores import ScoreKind
from oracle.certificates import run_certificates
from reduction.pci_schemes import PciScheme
from simulation.simulator import exact_policy_value, sample_batch
from simulation.tabular_pomdp import Scenario, TrajectoryBatch, build_scenario
from simulation.trajectory_store import write_trajectories

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "score_kind", "n", "seed", "estimate", "sigma2", "ci_lo", "ci_hi", "max_eta", "runtime_ms"]
TIMING_COLUMNS = ["method", "n", "seed", "runtime_ms"]
FLOAT_FORMAT = "%.17g"

PROXIMAL_METHODS = tuple(kind.value for kind in ScoreKind)
BASELINE_KIND = "baseline"
METHOD_FAILURES = (ProximalOpeError, LinAlgError, ValueError, FloatingPointError)


def replication_seed(base_seed: int, n: int, rep: int) -> int:
    """base_seed XOR a 32-bit BLAKE2b digest of "n:rep" """
    digest = hashlib.blake2b(f"{n}:{rep}".encode("utf-8"), digest_size=4).digest()
    return (int(base_seed) ^ int.from_bytes(digest, "big")) & 0xFFFFFFFF


def scenario_for(config: ExperimentConfig) -> Scenario:
    return build_scenario(config.scenario, config.eps_noise, config.horizon)


# ============================================
# ONE REPLICATION
# ============================================

def _nan_row(method: str, score_kind: str, n: int, seed: int) -> dict:
    return {
        "method": method, "score_kind": score_kind, "n": n, "seed": seed,
        "estimate": np.nan, "sigma2": np.nan, "ci_lo": np.nan, "ci_hi": np.nan,
        "max_eta": np.nan, "runtime_ms": None,
    }


def _baseline_row(method: str, estimate: float, n: int, seed: int) -> dict:
    row = _nan_row(method, BASELINE_KIND, n, seed)
    row["estimate"] = float(estimate)
    return row


def _run_baseline(method: str, batch: TrajectoryBatch, scenario: Scenario, config: ExperimentConfig) -> float:
    pomdp = scenario.pomdp
    eval_policy = scenario.policy(config.policy)
    if method == "mean_r":
        return mean_r(batch, config.gamma)
    if method == "mdp":
        return mdp_dp(batch, eval_policy, config.gamma, pomdp.n_obs, pomdp.n_actions, horizon=pomdp.horizon)
    if method == "tis":
        return tis(batch, eval_policy, config.gamma, n_obs=pomdp.n_obs, n_actions=pomdp.n_actions)
    raise ValueError(f"unknown baseline {method!r}")


def run_replication(config: ExperimentConfig, n: int, rep: int) -> Tuple[List[dict], List[dict]]:
    """
    Rows and timings for one (n, rep).

    The scenario is rebuilt here so that a pool worker needs nothing but the
    config; the proximal scores share one cross-fitted nuisance fit.
    """
    seed = replication_seed(config.base_seed, n, rep)
    scenario = scenario_for(config)
    batch = sample_batch(scenario.pomdp, scenario.behavior, n, seed)
    rows: List[dict] = []
    timings: List[dict] = []

    proximal = [m for m in config.methods if m in PROXIMAL_METHODS]
    if proximal:
        started = time.perf_counter()
        try:
            reports = estimate_values(
                batch,
                scenario.policy(config.policy),
                PciScheme.parse(config.scheme),
                config.vmm_config(),
                config.gamma,
                kinds=proximal,
                k_folds=config.k_folds,
                alphabets=scenario.pomdp.alphabets,
                seed=seed,
            )
            found = {kind.value: report.csv_row(kind.value, seed) for kind, report in reports.items()}
        except METHOD_FAILURES as e:
            logger.warning("%s failed at n=%d seed=%d: %s", "/".join(proximal), n, seed, e)
            found = {m: _nan_row(m, m, n, seed) for m in proximal}
        elapsed = 1000.0 * (time.perf_counter() - started)
        for m in proximal:
            timings.append({"method": m, "n": n, "seed": seed, "runtime_ms": elapsed})

    for method in config.methods:
        if method in PROXIMAL_METHODS:
            rows.append(found[method])
            continue
        started = time.perf_counter()
        try:
            rows.append(_baseline_row(method, _run_baseline(method, batch, scenario, config), n, seed))
        except METHOD_FAILURES as e:
            logger.warning("%s failed at n=%d seed=%d: %s", method, n, seed, e)
            rows.append(_nan_row(method, BASELINE_KIND, n, seed))
        timings.append({"method": method, "n": n, "seed": seed,
                        "runtime_ms": 1000.0 * (time.perf_counter() - started)})
    return rows, timings


# ============================================
# SUMMARY
# ============================================

@dataclass
class RunSummary:
    truth: float
    table: pd.DataFrame
    excluded: Dict[str, int] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)

    def row(self, method: str, n: int) -> pd.Series:
        hit = self.table[(self.table["method"] == method) & (self.table["n"] == n)]
        if hit.empty:
            raise KeyError(f"no summary for method={method} n={n}")
        return hit.iloc[0]

    def mse(self, method: str, n: int) -> float:
        return float(self.row(method, n)["mse"])


def _group_summary(group: pd.DataFrame, truth: float) -> dict:
    valid = group[np.isfinite(group["estimate"].astype(float))]
    k = len(valid)
    stats = {"n_valid": k, "n_excluded": len(group) - k}
    if k == 0:
        keys = ("mean", "sd", "bias", "variance", "mse", "mse_se", "sd_lo", "sd_hi",
                "mean_ci_lo", "mean_ci_hi", "coverage")
        return {**stats, **{key: np.nan for key in keys}}

    estimates = valid["estimate"].to_numpy(dtype=float)
    mean = float(estimates.mean())
    variance = float(estimates.var())
    sd = float(np.sqrt(variance))
    squared = (estimates - truth) ** 2
    half = Z_95 * sd / np.sqrt(k)

    lo = valid["ci_lo"].to_numpy(dtype=float)
    hi = valid["ci_hi"].to_numpy(dtype=float)
    with_ci = np.isfinite(lo) & np.isfinite(hi)
    coverage = float(np.mean((lo[with_ci] <= truth) & (truth <= hi[with_ci]))) if with_ci.any() else np.nan

    return {
        **stats,
        "mean": mean,
        "sd": sd,
        "bias": mean - truth,
        "variance": variance,
        "mse": float(squared.mean()),
        "mse_se": float(squared.std() / np.sqrt(k)),
        "sd_lo": mean - sd,
        "sd_hi": mean + sd,
        "mean_ci_lo": mean - half,
        "mean_ci_hi": mean + half,
        "coverage": coverage,
    }


def summarize(raw: pd.DataFrame, truth: float, timings: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    """
    Per (method, n) statistics recomputed from raw rows alone.

    Variances use ddof=0 so mse = bias^2 + variance exactly up to rounding.
    Rows with a NaN estimate are excluded and counted.
    """
    records = []
    for (method, n), group in raw.groupby(["method", "n"], sort=False):
        record = {"method": method, "n": int(n), **_group_summary(group, truth)}
        if timings is not None and not timings.empty:
            ms = timings[(timings["method"] == method) & (timings["n"] == n)]["runtime_ms"]
            record["runtime_ms_mean"] = float(ms.mean()) if len(ms) else np.nan
            record["runtime_ms_max"] = float(ms.max()) if len(ms) else np.nan
        else:
            record["runtime_ms_mean"] = record["runtime_ms_max"] = np.nan
        records.append(record)
    return pd.DataFrame.from_records(records)


def _timing_stats(timings: pd.DataFrame) -> Dict[str, dict]:
    stats = {}
    for method, ms in timings.groupby("method", sort=False)["runtime_ms"]:
        stats[method] = {"mean_ms": float(ms.mean()), "max_ms": float(ms.max()), "total_ms": float(ms.sum())}
    return stats


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")


# ============================================
# COMMANDS
# ============================================

def worker_count(n_jobs: Optional[int], n_tasks: int) -> int:
    """Requested workers capped by PRL_THREADS and the number of tasks"""
    return max(1, min(n_jobs or PRL_THREADS, PRL_THREADS, n_tasks))


def run(config: ExperimentConfig, n_jobs: Optional[int] = None) -> RunSummary:
    """Full replication grid; artifacts go to config.output_dir"""
    out = ensure_output_dir(config.output_dir)
    scenario = scenario_for(config)
    truth_value = exact_policy_value(scenario.pomdp, scenario.policy(config.policy), config.gamma)
    logger.info("truth v(%s) = %.10f on %s(eps=%g)", config.policy, truth_value, config.scenario, config.eps_noise)

    tasks = [(n, rep) for n in config.n_grid for rep in range(config.replications)]
    workers = worker_count(n_jobs, len(tasks))
    logger.info("%d replications x %d methods on %d workers", len(tasks), len(config.methods), workers)
    results = Parallel(n_jobs=workers)(delayed(run_replication)(config, n, rep) for n, rep in tasks)

    raw = pd.DataFrame([row for rows, _ in results for row in rows], columns=CSV_COLUMNS)
    timings = pd.DataFrame([t for _, ts in results for t in ts], columns=TIMING_COLUMNS)
    table = summarize(raw, truth_value, timings)

    artifacts = {name: str(out / name) for name in ("raw.csv", "summary.csv", "timings.csv", "manifest.json")}
    _write_csv(raw, out / "raw.csv")
    _write_csv(table, out / "summary.csv")
    _write_csv(timings, out / "timings.csv")

    excluded = {m: int(table[table["method"] == m]["n_excluded"].sum()) for m in config.methods}
    if any(excluded.values()):
        logger.warning("excluded failed replications: %s", excluded)
    manifest = {
        "library_version": LIBRARY_VERSION,
        "config": config.model_dump(mode="json", by_alias=True),
        "vmm": config.vmm_config().model_dump(mode="json", by_alias=True),
        "truth": truth_value,
        "replication_tasks": len(tasks),
        "excluded": excluded,
        "timings": _timing_stats(timings),
        "artifacts": sorted(artifacts),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, default=float)

    return RunSummary(truth_value, table, excluded, artifacts)


def verify(
    config: ExperimentConfig,
    corrupt_q: float = 0.0,
    directions: int = 20,
    policies: Optional[List[str]] = None,
    write: bool = True,
) -> dict:
    """Certificate report for every policy of the scenario (or `policies`)"""
    scenario = scenario_for(config)
    report = run_certificates(
        scenario,
        PciScheme.parse(config.scheme),
        config.gamma,
        corrupt_q=corrupt_q,
        directions=directions,
        seed=config.base_seed,
        policies=policies,
    )
    report["library_version"] = LIBRARY_VERSION
    if write:
        out = ensure_output_dir(config.output_dir)
        with open(out / "certificates.json", "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, default=float)
    return report


def truth(config: ExperimentConfig, policy: Optional[str] = None) -> Dict[str, float]:
    scenario = scenario_for(config)
    names = [policy] if policy else list(scenario.policies)
    return {name: exact_policy_value(scenario.pomdp, scenario.policy(name), config.gamma) for name in names}


def sample(config: ExperimentConfig, n: int, seed: int, path: str, with_hidden: bool = False) -> int:
    scenario = scenario_for(config)
    batch = sample_batch(scenario.pomdp, scenario.behavior, n, seed, with_hidden=with_hidden)
    return write_trajectories(batch.to_trajectories(), path)
