"""Exception hierarchy shared by the solver layers."""

from __future__ import annotations


class ThermoplastError(Exception):
    """Base class for all package errors."""


class DegenerateMeshError(ThermoplastError):
    pass


class KornViolationError(ThermoplastError):
    pass


class PositivityError(ThermoplastError):
    """A nodal temperature became nonpositive."""


class NonConvergenceError(ThermoplastError):
    def __init__(self, message: str, residuals: dict | None = None, step: int | None = None):
        super().__init__(message)
        self.residuals = dict(residuals or {})
        self.step = step

    def __str__(self):
        base = super().__str__()
        if self.step is not None:
            base = f"step {self.step}: {base}"
        if self.residuals:
            extra = ", ".join(f"{k}={v:.3e}" for k, v in self.residuals.items())
            base = f"{base} ({extra})"
        return base


class StabilityViolationError(ThermoplastError):
    pass


class ConfigError(ThermoplastError):
    """Configuration problems; ``issues`` lists (path, message) pairs."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(f"{p}: {m}" if p else m for p, m in self.issues))
