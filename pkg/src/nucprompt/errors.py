"""Exception types shared across the package."""


class NucPromptError(Exception):
    """Base class for all package errors."""


class ConfigError(NucPromptError, ValueError):
    """Invalid configuration or argument."""


class ShapeError(NucPromptError, ValueError):
    """Array or image shape violates a precondition."""


class NumericError(NucPromptError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class GenerationError(NucPromptError, RuntimeError):
    """Synthetic scene generation could not place all nuclei."""


class DatasetError(NucPromptError, OSError):
    """A dataset file is missing, unreadable or corrupt."""


class ConsistencyError(NucPromptError, ValueError):
    """Two sources of the same information disagree."""


class DivergenceError(NucPromptError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, breakdown):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
