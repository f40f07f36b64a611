"""
Experiment Configuration
Environment-backed settings, the hand-chosen VMM hyperparameters and the
validated config models used by the CLI
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

load_dotenv()

# Worker cap for replication pools
PRL_THREADS = int(os.getenv("PRL_THREADS", str(os.cpu_count() or 1)))
LOG_LEVEL = os.getenv("PRL_LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("PRL_OUTPUT_DIR", "results")
ENUMERATION_BUDGET = int(os.getenv("PRL_ENUMERATION_BUDGET", "10000000"))
SLOW_TESTS = os.getenv("PRL_SLOW_TESTS", "0") == "1"

LIBRARY_VERSION = "0.3.0"

# Full-scale defaults
N_GRID = (200, 500, 1000, 2000, 5000, 10000)
FULL_REPLICATIONS = 100
DEFAULT_REPLICATIONS = 20
DEFAULT_K_FOLDS = 5
DEFAULT_OUTER_ITERATIONS = 2
DEFAULT_JITTER = 1e-8
DEFAULT_KERNEL_SCALES = (0.25, 1.0, 4.0)

# Grids the (alpha, lambda) table was picked from
ALPHA_GRID = (1e-2, 1e-4, 1e-6, 1e-8)
LAMBDA_GRID = (1.0, 1e-2, 1e-4, 1e-6)

# (eps_noise, policy) -> (alpha, lambda)
HYPERPARAMETERS: Dict[Tuple[float, str], Tuple[float, float]] = {
    (0.0, "easy"): (1e-4, 1e-4),
    (0.0, "hard"): (1e-2, 1e-2),
    (0.0, "optim"): (1e-4, 1e-2),
    (0.2, "easy"): (1e-4, 1e-4),
    (0.2, "hard"): (1e-2, 1e-4),
    (0.2, "optim"): (1e-4, 1e-4),
}
FALLBACK_HYPERPARAMETERS = (1e-4, 1e-4)

METHODS = ("dr", "is", "reg", "mdp", "mean_r", "tis")
SCENARIO_POLICIES = {
    "noisyobs": ("easy", "hard", "optim"),
    "sticky_shift": ("stay", "shift", "mixed"),
}


def configure_logging(level: Optional[str] = None) -> None:
    """Install the root handler once (CLI entry point only)"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def hyperparameters_for(eps_noise: float, policy: str) -> Tuple[float, float]:
    """Look up (alpha, lambda) for a NoisyObs setting"""
    return HYPERPARAMETERS.get((round(float(eps_noise), 6), policy), FALLBACK_HYPERPARAMETERS)


class VmmConfig(BaseModel):
    """Sequential kernel VMM settings (one alpha and one lambda for every step)"""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    alpha: float = Field(1e-4, ge=0.0)
    lam: float = Field(1e-4, ge=0.0, alias="lambda")
    outer_iterations: int = Field(DEFAULT_OUTER_ITERATIONS, ge=1)
    jitter: float = Field(DEFAULT_JITTER, ge=0.0)
    kernel_scales: Tuple[float, ...] = DEFAULT_KERNEL_SCALES

    @field_validator("kernel_scales")
    @classmethod
    def _positive_scales(cls, scales: Tuple[float, ...]) -> Tuple[float, ...]:
        if not scales or any(c <= 0 for c in scales):
            raise ValueError("kernel scale multipliers must be positive")
        return tuple(float(c) for c in scales)


class ExperimentConfig(BaseModel):
    """One batch experiment: scenario, policy, sample sizes, methods"""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    scenario: Literal["noisyobs", "sticky_shift"] = "noisyobs"
    eps_noise: float = Field(0.2, ge=0.0, le=1.0)
    policy: str = "easy"
    gamma: float = Field(1.0, gt=0.0, le=1.0)
    horizon: int = Field(3, ge=1)
    n_grid: List[int] = Field(default_factory=lambda: list(N_GRID))
    replications: int = Field(DEFAULT_REPLICATIONS, ge=1)
    base_seed: int = 0
    methods: List[str] = Field(default_factory=lambda: ["dr", "mdp", "mean_r", "tis"])
    k_folds: int = Field(DEFAULT_K_FOLDS, ge=1)
    alpha: Optional[float] = Field(None, ge=0.0)
    lam: Optional[float] = Field(None, ge=0.0, alias="lambda")
    outer_iterations: int = Field(DEFAULT_OUTER_ITERATIONS, ge=1)
    scheme: str = "prev_obs"
    output_dir: str = OUTPUT_DIR

    @field_validator("n_grid")
    @classmethod
    def _ascending_grid(cls, grid: List[int]) -> List[int]:
        if not grid:
            raise ValueError("n_grid must not be empty")
        if any(n < 1 for n in grid):
            raise ValueError("sample sizes must be positive")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_grid must be strictly ascending")
        return grid

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, methods: List[str]) -> List[str]:
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if not methods:
            raise ValueError("at least one method is required")
        return list(dict.fromkeys(methods))

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.policy not in SCENARIO_POLICIES[self.scenario]:
            raise ValueError(
                f"policy {self.policy!r} not defined for {self.scenario}; "
                f"choose from {list(SCENARIO_POLICIES[self.scenario])}"
            )
        if self.k_folds > min(self.n_grid):
            raise ValueError(f"k_folds={self.k_folds} exceeds smallest n={min(self.n_grid)}")
        return self

    def vmm_config(self) -> VmmConfig:
        """Resolve alpha/lambda, falling back to the hand-chosen table"""
        alpha, lam = hyperparameters_for(self.eps_noise, self.policy)
        return VmmConfig(
            alpha=alpha if self.alpha is None else self.alpha,
            lam=lam if self.lam is None else self.lam,
            outer_iterations=self.outer_iterations,
        )

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Apply CLI flag overrides, revalidating every field"""
        data = self.model_dump(by_alias=True)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return load_config_dict(data)

    @classmethod
    def from_json_file(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return load_config_dict(json.load(f))


def load_config_dict(data: dict) -> ExperimentConfig:
    """Validate a raw dict, turning pydantic errors into one ConfigError"""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        fields = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"invalid experiment config - {fields}") from e


def ensure_output_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


if __name__ == "__main__":
    print("Experiment Configuration:")
    print(f"Threads: {PRL_THREADS}")
    print(f"Output dir: {OUTPUT_DIR}")
    print(f"Enumeration budget: {ENUMERATION_BUDGET:,}")
    for (eps, policy), (alpha, lam) in HYPERPARAMETERS.items():
        print(f"  eps={eps} {policy:<6} alpha={alpha:g} lambda={lam:g}")
