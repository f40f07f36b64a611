"""
TABULAR FUNCTIONS - bridge functions stored as values on (control, action) pairs
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SupportPoint = Tuple[float, int]


def unique_pairs(controls: np.ndarray, actions: np.ndarray) -> Tuple[Tuple[SupportPoint, ...], np.ndarray]:
    """Sorted unique (control, action) pairs and each row's index into them"""
    pairs = np.column_stack([np.asarray(controls, dtype=float), np.asarray(actions, dtype=float)])
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    support = tuple((float(c), int(a)) for c, a in uniq)
    return support, inverse.reshape(-1)


@dataclass
class TabularFn:
    """
    f(control, action) on a finite support; anything else returns
    `default_value` and bumps `unseen_lookups`.
    """

    support: Tuple[SupportPoint, ...]
    values: np.ndarray
    default_value: float
    diagnostics: Dict[str, float] = field(default_factory=dict)
    unseen_lookups: int = 0

    def __post_init__(self):
        self.support = tuple((float(c), int(a)) for c, a in self.support)
        self.values = np.array(self.values, dtype=float).reshape(-1)
        if len(self.support) != self.values.shape[0]:
            raise ValueError(f"{len(self.support)} support points but {self.values.shape[0]} values")
        self._index = {point: i for i, point in enumerate(self.support)}
        if len(self._index) != len(self.support):
            raise ValueError("support has duplicate points")

    @classmethod
    def constant(cls, value: float) -> "TabularFn":
        return cls(support=(), values=np.zeros(0), default_value=value)

    def with_values(self, values) -> "TabularFn":
        return TabularFn(self.support, values, self.default_value, dict(self.diagnostics))

    def __call__(self, control: float, action: int) -> float:
        i = self._index.get((float(control), int(action)))
        if i is None:
            if self.support:
                self.unseen_lookups += 1
            return self.default_value
        return float(self.values[i])

    def lookup(self, controls: np.ndarray, actions) -> np.ndarray:
        """Vectorized evaluation; `actions` may be a scalar"""
        controls = np.asarray(controls, dtype=float)
        actions = np.broadcast_to(np.asarray(actions, dtype=int), controls.shape)
        if controls.size == 0:
            return np.zeros(controls.shape)
        if not self.support:
            return np.full(controls.shape, self.default_value)
        uniq, inverse = unique_pairs(controls.ravel(), actions.ravel())
        resolved = np.empty(len(uniq))
        missing = np.zeros(len(uniq), dtype=bool)
        for k, point in enumerate(uniq):
            i = self._index.get(point)
            if i is None:
                missing[k] = True
                resolved[k] = self.default_value
            else:
                resolved[k] = self.values[i]
        if missing.any():
            self.unseen_lookups += int(missing[inverse].sum())
        return resolved[inverse].reshape(controls.shape)

    def action_sum(self, controls: np.ndarray, n_actions: int) -> np.ndarray:
        """sum_a f(control, a)"""
        return sum(self.lookup(controls, a) for a in range(n_actions))

    def as_dict(self) -> dict:
        return {
            "support": [list(p) for p in self.support],
            "values": self.values.tolist(),
            "default_value": self.default_value,
            "unseen_lookups": self.unseen_lookups,
            "diagnostics": self.diagnostics,
        }
