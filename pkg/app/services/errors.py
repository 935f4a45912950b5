"""
Exception types shared by the services.
Each one subclasses the matching builtin so callers can catch either.
"""

from typing import Optional


class ShapeError(ValueError):
    """Array dimensions do not compose."""


class ParameterError(ValueError):
    """A numeric parameter is outside its allowed range."""


class LabelIndexError(IndexError):
    """A class index is outside [0, K)."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class FormatError(ValueError):
    """A binary file does not match its declared format."""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        where = []
        if path:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.offset = offset
        self.path = path


class DegenerateTableError(ValueError):
    """Every disagreement probability is (numerically) zero."""


class ConsistencyError(ValueError):
    """Two structures that must agree (table vs dataset, weights vs examples) do not."""


class InconclusiveError(ValueError):
    """A group needed for the computation is empty."""


class UnsupportedShapeError(ValueError):
    """An image-only operation was applied to non-image features."""


class PreconditionError(ValueError):
    """Input values violate a stated precondition."""


class ConfigError(ValueError):
    """Experiment configuration is invalid."""
