"""Exception types shared across the crl package.

The CLI maps these onto its exit codes: validation problems exit 1,
numerical aborts exit 3.
"""

from typing import Optional


class CrlError(Exception):
    """Base class for every error raised by the crl package."""


class ValidationError(CrlError, ValueError):
    """Input failed a structural or range check."""


class CorpusError(ValidationError):
    """A corpus or MDP could not be constructed."""

    def __init__(self, message: str, goal_id: Optional[int] = None):
        super().__init__(message)
        self.goal_id = goal_id


class MaskStructureError(ValidationError):
    """A packed sequence violates the role layout or a mask row is empty."""

    def __init__(self, message: str, position: Optional[int] = None):
        super().__init__(message)
        self.position = position


class ShardPlanError(ValidationError):
    """A shard plan is not a partition of the batch."""


class NumericalAbort(CrlError, ArithmeticError):
    """A loss or solver produced a non-finite or non-convergent result."""

    def __init__(self, message: str, step: Optional[int] = None,
                 param_norms: Optional[dict[str, float]] = None):
        super().__init__(message)
        self.step = step
        self.param_norms = param_norms or {}


class OracleConvergenceError(NumericalAbort):
    """Power iteration for the occupancy oracle hit its iteration cap."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual
