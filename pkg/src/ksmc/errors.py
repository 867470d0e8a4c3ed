"""Exception types shared across the package."""

from __future__ import annotations


class KsmcError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(KsmcError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ParseError(KsmcError):
    """Lexical or syntax error in model or query text."""

    def __init__(self, message: str, line: int, col: int, expected: tuple[str, ...] = ()):
        self.message = message
        self.line = line
        self.col = col
        self.expected = tuple(expected)
        detail = f"{message} at {line}:{col}"
        if expected:
            detail += f" (expected one of: {', '.join(expected)})"
        super().__init__(detail)


class ValidationError(KsmcError):
    """A model definition that parses but does not describe a valid network."""


class PreconditionError(KsmcError):
    """An operation was invoked on arguments that violate its contract."""


class InvariantViolation(KsmcError):
    """A location invariant fails; ``time`` is the absolute violation instant when known."""

    def __init__(self, instance: str, invariant: str, time: float | None = None):
        self.instance = instance
        self.invariant = invariant
        self.time = time
        msg = f"invariant '{invariant}' of instance {instance} violated"
        if time is not None:
            msg += f" at t={time:.12g}"
        super().__init__(msg)


class StateBudgetExceeded(KsmcError):
    def __init__(self, budget: int):
        self.budget = budget
        super().__init__(f"state budget of {budget} states exceeded")


class TimedModelError(KsmcError):
    """Raised when an untimed analysis is asked to handle continuous dynamics."""
