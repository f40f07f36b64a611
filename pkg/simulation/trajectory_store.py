"""
TRAJECTORY STORE - JSON persistence for models and logged trajectories

Models are one JSON document mirroring the TabularPOMDP fields (plus the
logging policy when given); trajectories are JSON-lines, one episode per line:
{"o0": int, "steps": [{"o": int, "a": int, "r": float}], "hidden": {...}}
"""

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

from errors import ModelValidationError
from simulation.tabular_pomdp import Alphabets, BehaviorPolicy, TabularPOMDP, Trajectory

logger = logging.getLogger(__name__)


def save_model(pomdp: TabularPOMDP, filepath: str, behavior: Optional[BehaviorPolicy] = None) -> None:
    document = pomdp.to_dict()
    if behavior is not None:
        document["behavior"] = behavior.probs.tolist()
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
    logger.info("model saved to %s (%d states, %d actions, %d observations)",
                filepath, pomdp.n_states, pomdp.n_actions, pomdp.n_obs)


def load_model(filepath: str) -> Tuple[TabularPOMDP, Optional[BehaviorPolicy]]:
    with open(filepath, "r", encoding="utf-8") as f:
        document = json.load(f)
    behavior = document.pop("behavior", None)
    try:
        pomdp = TabularPOMDP.from_dict(document)
    except TypeError as e:
        raise ModelValidationError(f"model file {filepath} has unexpected fields: {e}") from e
    return pomdp, None if behavior is None else BehaviorPolicy(behavior)


def write_trajectories(trajectories: Iterable[Trajectory], filepath: str) -> int:
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(filepath, "w", encoding="utf-8") as f:
        for trajectory in trajectories:
            f.write(json.dumps(trajectory.to_dict(), separators=(",", ":")) + "\n")
            count += 1
    logger.info("wrote %d trajectories to %s", count, filepath)
    return count


def read_trajectories(
    filepath: str,
    alphabets: Optional[Alphabets] = None,
    strict: bool = True,
) -> List[Trajectory]:
    """
    Read a JSON-lines file.

    With strict=False malformed lines are logged and skipped instead of
    raising.
    """
    trajectories = []
    with open(filepath, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                trajectory = Trajectory.from_dict(json.loads(line))
                if alphabets is not None:
                    trajectory.validate(alphabets)
            except (KeyError, TypeError, ValueError) as e:
                if strict:
                    raise ModelValidationError(f"{filepath}:{line_no}: bad trajectory record ({e})") from e
                logger.warning("skipping %s:%d: %s", filepath, line_no, e)
                continue
            trajectories.append(trajectory)
    return trajectories
