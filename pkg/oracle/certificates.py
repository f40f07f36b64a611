"""
CERTIFICATES - exact identification checks on an enumerated scenario

For every target policy of a scenario:
- identification: E_b[psi] with oracle bridges equals the exact policy value
  for the IS, Reg and DR scores
- tis: the population time-independent-sampling value equals it too
- moments: oracle bridges satisfy the eta-weighted logging-law moments, and
  bridges solved from those moments give the same DR value
- orthogonality: E_b[psi_DR] is flat to first order in random directions

The report is plain JSON data; `passed` is the conjunction of every check.
"""

import logging
from typing import Dict, Optional

import numpy as np

from baselines.tis import TisNuisance, fit_tis_nuisance, tis_value
from errors import NoSolution, ZeroPropensity
from estimators.scores import ScoreKind
from oracle.population_oracle import (
    WeightedTrajectorySet,
    enumerate_law,
    expected_score,
    law_table,
    moment_residuals,
    orthogonality_derivative,
    random_direction,
    solve_from_moments,
    solve_oracle_nuisances,
)
from reduction.pci_schemes import PciScheme
from simulation.simulator import exact_policy_value
from simulation.tabular_pomdp import EvalPolicy, Scenario

logger = logging.getLogger(__name__)

VALUE_TOL = 1e-8
MOMENT_TOL = 1e-10
DERIVATIVE_TOL = 1e-6
FD_STEP = 1e-4


def _corrupt(nuisances, shift: float):
    if not shift:
        return nuisances
    nuisances.q = [f.with_values(f.values + shift) for f in nuisances.q]
    return nuisances


def certify_policy(
    scenario: Scenario,
    eval_policy: EvalPolicy,
    scheme: PciScheme,
    gamma: float,
    logging_law: WeightedTrajectorySet,
    tis_nuisance: TisNuisance,
    corrupt_q: float = 0.0,
    directions: int = 20,
    seed: int = 0,
) -> Dict:
    pomdp, behavior = scenario.pomdp, scenario.behavior
    truth = exact_policy_value(pomdp, eval_policy, gamma)
    report: Dict = {"truth": truth, "checks": {}}
    checks = report["checks"]

    lt = law_table(logging_law, eval_policy, scheme, pomdp.n_obs)
    tis_estimate = tis_value(tis_nuisance, eval_policy, gamma)
    checks["tis"] = {
        "value": tis_estimate,
        "error": abs(tis_estimate - truth),
        "low_confidence": tis_nuisance.low_confidence,
        "passed": abs(tis_estimate - truth) <= VALUE_TOL and not tis_nuisance.low_confidence,
    }

    try:
        oracle = solve_oracle_nuisances(pomdp, behavior, eval_policy, scheme, gamma)
    except (NoSolution, ZeroPropensity) as e:
        logger.warning("%s / %s: %s", scenario.name, eval_policy.name, e)
        checks["bridges"] = {
            "passed": False,
            "error": str(e),
            "t": e.t,
            "which": getattr(e, "which", "q"),
            "residual": getattr(e, "residual", None),
        }
        report["passed"] = False
        return report
    checks["bridges"] = {"passed": True, **oracle.diagnostics}
    oracle = _corrupt(oracle, corrupt_q)

    identification = {}
    for kind in ScoreKind:
        value = expected_score(lt, oracle, gamma, kind)
        identification[kind.value] = {
            "value": value,
            "error": abs(value - truth),
            "passed": abs(value - truth) <= VALUE_TOL,
        }
    checks["identification"] = identification

    residuals = moment_residuals(lt, oracle, gamma)
    worst = max(max(residuals["q"]), max(residuals["h"]))
    try:
        from_moments = solve_from_moments(pomdp, behavior, eval_policy, scheme, gamma, logging_table=lt)
        moment_value = expected_score(lt, from_moments, gamma, ScoreKind.DR)
        moment_gap = abs(moment_value - identification["dr"]["value"])
        moment_error = None
    except (NoSolution, ZeroPropensity) as e:
        moment_value, moment_gap, moment_error = None, None, str(e)
    checks["moments"] = {
        "residuals": residuals,
        "max_residual": worst,
        "dr_from_moments": moment_value,
        "dr_gap": moment_gap,
        "error": moment_error,
        "passed": worst <= MOMENT_TOL and moment_gap is not None and moment_gap <= VALUE_TOL,
    }

    rng = np.random.default_rng(seed)
    derivatives = [
        orthogonality_derivative(lt, oracle, gamma, random_direction(oracle, rng), FD_STEP)
        for _ in range(directions)
    ]
    largest = float(np.max(np.abs(derivatives))) if derivatives else 0.0
    checks["orthogonality"] = {
        "max_abs_derivative": largest,
        "directions": directions,
        "passed": largest <= DERIVATIVE_TOL,
    }

    report["passed"] = all(
        c["passed"] for c in (checks["tis"], checks["bridges"], checks["moments"], checks["orthogonality"])
    ) and all(v["passed"] for v in identification.values())
    return report


def run_certificates(
    scenario: Scenario,
    scheme: PciScheme,
    gamma: float,
    corrupt_q: float = 0.0,
    directions: int = 20,
    seed: int = 0,
    policies: Optional[list] = None,
) -> Dict:
    names = policies or list(scenario.policies)
    pomdp = scenario.pomdp
    logging_law = enumerate_law(pomdp, scenario.behavior, None, 1).observable()
    batch, probs = logging_law.to_batch()
    tis_nuisance = fit_tis_nuisance(batch, pomdp.n_obs, pomdp.n_actions, weights=probs)
    results = {}
    for name in names:
        logger.info("certifying %s / %s", scenario.name, name)
        results[name] = certify_policy(
            scenario, scenario.policy(name), scheme, gamma, logging_law, tis_nuisance,
            corrupt_q, directions, seed,
        )
    return {
        "scenario": scenario.name,
        "eps_noise": scenario.eps_noise,
        "horizon": scenario.pomdp.horizon,
        "scheme": scheme.label,
        "gamma": gamma,
        "corrupt_q": corrupt_q,
        "policies": results,
        "passed": all(r["passed"] for r in results.values()),
    }
