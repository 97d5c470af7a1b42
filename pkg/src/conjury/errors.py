"""Exception types shared across the package."""


class ConjuryError(Exception):
    """Base class for all package-level failures."""


class ValidationError(ConjuryError):
    """Rejected input: bad shape, mismatched depths, out-of-range order."""


class ConstructionError(ConjuryError):
    """A constructive step failed its own certificate (disjointness,
    injectivity sampling, size budgets)."""

    def __init__(self, message, clause=None):
        super().__init__(message)
        self.clause = clause


class RecoveryError(ConjuryError):
    """A spectrum or detection table is inconsistent with every code."""


class AmbiguousDetectionError(ConjuryError):
    """Edge detection saw a displacement too small to trust."""


class IntegrationError(ConjuryError):
    """Adaptive stepping underflowed the step size."""


class NotConjugateError(ConjuryError):
    """Requested conjugacy is obstructed (sign mismatch, non-isomorphic
    graphs)."""
