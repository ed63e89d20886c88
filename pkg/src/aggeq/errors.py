"""Exception types shared across the package."""


class AggeqError(Exception):
    """Base class for all library errors."""


class DimensionError(AggeqError, ValueError):
    """Vector or matrix dimensions are inconsistent."""


class InfeasibleSetError(AggeqError, ValueError):
    """A constraint set is empty or an input lies outside its domain."""


class ConvergenceError(AggeqError, RuntimeError):
    """An iterative method did not reach its tolerance.

    Carries the last iterate and the remaining gap so callers can inspect
    partial progress.
    """

    def __init__(self, message, last=None, gap=None):
        super().__init__(message)
        self.last = last
        self.gap = gap


class ConfigError(AggeqError, ValueError):
    """An experiment configuration failed validation."""
