"""
Error hierarchy for the solver stack.

Every error carries the process exit code the CLI should return, the way an API error
carries its HTTP status.
"""
from typing import Any, Dict, Optional


class SolverError(Exception):
    """Base class for every failure raised by the library."""

    exit_code: int = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": self.message, **self.details}


class ConfigurationError(SolverError):
    """Invalid run configuration. `pointer` is a JSON pointer into the config document."""

    exit_code = 2

    def __init__(self, message: str, pointer: str = "", **details: Any):
        super().__init__(message, pointer=pointer, **details)
        self.pointer = pointer

    @property
    def dotted_path(self) -> str:
        return self.pointer.strip("/").replace("/", ".")


class ParameterError(SolverError, ValueError):
    exit_code = 2


class ShapeError(ParameterError):
    pass


class SingularCoefficientError(ParameterError):
    pass


class AdmissibilityError(ParameterError):
    pass


class StepSizeError(SolverError):
    """Time step too coarse for the coefficients or the jump intensity."""

    exit_code = 2

    def __init__(self, message: str, suggested_n_steps: Optional[int] = None, **details: Any):
        super().__init__(message, suggested_n_steps=suggested_n_steps, **details)
        self.suggested_n_steps = suggested_n_steps


class ConvergenceError(SolverError):
    exit_code = 3

    def __init__(
        self,
        message: str,
        node_id: str = "",
        residual: float = float("nan"),
        stage: Optional[int] = None,
        **details: Any,
    ):
        super().__init__(message, node_id=node_id, residual=residual, stage=stage, **details)
        self.node_id = node_id
        self.residual = residual
        self.stage = stage


class ValidationFailure(SolverError):
    exit_code = 4


__all__ = [
    "SolverError",
    "ConfigurationError",
    "ParameterError",
    "ShapeError",
    "SingularCoefficientError",
    "AdmissibilityError",
    "StepSizeError",
    "ConvergenceError",
    "ValidationFailure",
]
