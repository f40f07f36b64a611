"""
ERRORS - failure types shared by the simulator, estimators and oracle

Library code raises these; the experiment runner catches them per
replication and records NaN rows instead of aborting the run.

Errors with structured fields define __reduce__ so they survive the trip
back from joblib workers.
"""

from typing import Optional


class ProximalOpeError(Exception):
    """Base class for every error raised by this project"""


class ModelValidationError(ProximalOpeError, ValueError):
    """Malformed model tensors, policies or trajectories"""


class ConfigError(ProximalOpeError, ValueError):
    """Experiment configuration rejected (field-level message)"""


class EnumerationTooLarge(ProximalOpeError):
    """Exact enumeration would exceed the path budget"""

    def __init__(self, path_count: int, budget: int):
        self.path_count = path_count
        self.budget = budget
        super().__init__(
            f"enumeration needs up to {path_count:,} paths, budget is {budget:,}"
        )

    def __reduce__(self):
        return (self.__class__, (self.path_count, self.budget))


class SchemeInapplicable(ProximalOpeError, ValueError):
    """Reduction scheme cannot be applied to this trajectory or step"""


class SingularSystem(ProximalOpeError):
    """Normal equations of a VMM solve are numerically singular"""

    def __init__(self, t: int, which: str, detail: str = ""):
        self.t = t
        self.which = which
        self.detail = detail
        message = f"singular {which}-system at t={t}"
        if detail:
            message += f": {detail}"
        super().__init__(message)

    def __reduce__(self):
        return (self.__class__, (self.t, self.which, self.detail))


class NoSolution(ProximalOpeError):
    """Bridge equation has no exact solution (residual above tolerance)"""

    def __init__(self, t: int, which: str, residual: float):
        self.t = t
        self.which = which
        self.residual = residual
        super().__init__(
            f"no exact {which}-bridge at t={t} (least-squares residual {residual:.3e})"
        )

    def __reduce__(self):
        return (self.__class__, (self.t, self.which, self.residual))


class ZeroPropensity(ProximalOpeError):
    """Some action has zero probability given the outcome control"""

    def __init__(self, t: int, detail: Optional[str] = None):
        self.t = t
        self.detail = detail
        super().__init__(f"zero propensity at t={t}" + (f": {detail}" if detail else ""))

    def __reduce__(self):
        return (self.__class__, (self.t, self.detail))


class FoldFailed(ProximalOpeError):
    """Nuisance fitting failed on one cross-fitting fold"""

    def __init__(self, fold: int, cause: Exception):
        self.fold = fold
        self.cause = cause
        super().__init__(f"fold {fold} failed: {cause}")

    def __reduce__(self):
        return (self.__class__, (self.fold, self.cause))


class UnvisitedCellWarning(UserWarning):
    """An (observation, action) cell was never visited in the data"""


class SingularQMatrixWarning(UserWarning):
    """A TIS conditional matrix was inverted with a pseudo-inverse"""


class NonStandardFoldingWarning(UserWarning):
    """Nuisances were fit and evaluated on the same data"""
