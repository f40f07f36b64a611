"""
KERNELS - one-hot embeddings and the Gaussian-mixture kernel of the VMM solves
"""

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from config import DEFAULT_KERNEL_SCALES
from reduction.pci_schemes import ControlKind, ControlSpec, ControlValue

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    """
    K(x, y) = mean_i exp(-|x - y|^2 / (2 c_i s2)).

    `bandwidth` is the calibrated s2 (mean per-dimension variance of the
    calibration sample); None means "calibrate on the points passed to gram".
    """

    scale_multipliers: Tuple[float, ...] = DEFAULT_KERNEL_SCALES
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if not self.scale_multipliers or any(c <= 0 for c in self.scale_multipliers):
            raise ValueError("scale multipliers must be positive")

    def calibrated(self, xs: np.ndarray) -> "KernelSpec":
        variance = float(np.mean(np.var(np.asarray(xs, dtype=float), axis=0)))
        return replace(self, bandwidth=max(variance, VARIANCE_FLOOR))


def embed(value: ControlValue, action: int, spec: ControlSpec, n_actions: int) -> np.ndarray:
    """One-hot(control) ++ one-hot(action); reward controls keep their raw value"""
    return embed_columns(np.array([value.value]), np.array([action]), spec, n_actions)[0]


def embed_columns(values: np.ndarray, actions: np.ndarray, spec: ControlSpec, n_actions: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    actions = np.asarray(actions, dtype=int)
    n = values.shape[0]
    if spec.kind == ControlKind.REWARD:
        control = values[:, None]
    else:
        control = np.zeros((n, spec.size))
        control[np.arange(n), values.astype(int)] = 1.0
    action = np.zeros((n, n_actions))
    action[np.arange(n), actions] = 1.0
    return np.hstack([control, action])


def gram(kernel: KernelSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if kernel.bandwidth is None:
        kernel = kernel.calibrated(np.vstack([xs, ys]))
    sq_dist = cdist(xs, ys, "sqeuclidean")
    out = np.zeros_like(sq_dist)
    for c in kernel.scale_multipliers:
        out += np.exp(-sq_dist / (2.0 * c * kernel.bandwidth))
    return out / len(kernel.scale_multipliers)
