"""Exception types shared across the package."""

from __future__ import annotations


class LohmmError(Exception):
    """Base class for every error this package raises on purpose."""


class ParseError(LohmmError):
    """Malformed textual input. Carries the 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UndeclaredPredicate(LohmmError):
    """An atom uses a predicate the signature does not declare."""


class SharedVariableConflict(LohmmError):
    """A variable occupies argument positions with different declared domains."""


class DomainMismatch(LohmmError):
    """A constant appears at a position whose domain does not contain it."""


class NoMatchingBody(LohmmError):
    """A ground state is subsumed by no transition body."""


class AmbiguousBody(LohmmError):
    """A ground state has no unique maximally specific subsuming body.

    Raised at routing time only for states outside the enumerated
    well-foundedness check (compound-term states); validated models
    never trigger it on functor-free states.
    """


class ValidationError(LohmmError):
    """A model failed validation. Carries the list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid model: {lines}")


class ZeroLikelihoodSequence(LohmmError):
    """A data case has probability zero under the model. Carries its index."""

    def __init__(self, index: int, message: str | None = None):
        super().__init__(message or f"sequence {index} has zero likelihood")
        self.index = index


class AllZeroLikelihood(LohmmError):
    """Every class model assigns zero likelihood to the sequence."""


class IncompatibleCounts(LohmmError):
    """An expected-count triple with positive weight has zero probability."""

    def __init__(self, triple, message: str | None = None):
        super().__init__(message or f"count triple {triple} is unreachable under the model")
        self.triple = triple
