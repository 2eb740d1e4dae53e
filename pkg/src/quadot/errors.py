"""Exception taxonomy for quadot.

Every error raised by the library is a subclass of :class:`QuadotError`, so
callers (in particular the CLI) can map library failures to exit codes with a
single except clause.
"""

from __future__ import annotations


class QuadotError(Exception):
    """Base class for all quadot errors."""


class InputError(QuadotError):
    """Malformed user input (CSV/JSON/flags)."""


# --- measure validation -----------------------------------------------------

class NegativeWeightError(QuadotError):
    """A weight is negative."""


class WeightSumMismatchError(QuadotError):
    """Weights do not sum to 1 within the absolute tolerance 1e-12."""


class DimensionMismatchError(QuadotError):
    """Point dimensions disagree (within a measure, or across P and Q)."""


class TooLargeError(QuadotError):
    """Requested object exceeds a configured size cap."""


# --- solvers -----------------------------------------------------------------

class NonpositiveEpsilonError(QuadotError):
    """The regularization strength must be > 0."""


class NotConvergedError(QuadotError):
    """Solver hit its iteration cap before reaching tolerance.

    Carries the best iterate and its report so callers can inspect or resume.
    """

    def __init__(self, message, potentials=None, report=None):
        super().__init__(message)
        self.potentials = potentials
        self.report = report


class NoConsistentActiveSetError(QuadotError):
    """Brute-force enumeration found no active set passing the sign checks."""


# --- coupling ----------------------------------------------------------------

class InfeasibleCouplingError(QuadotError):
    """Coupling marginals deviate from (p, q) beyond the feasibility window."""


# --- geometry / limit laws ---------------------------------------------------

class EmptySectionError(QuadotError):
    """A support section carries no mass where positive mass is required."""


class EmptySupportError(QuadotError):
    """The slack is nonpositive everywhere; the coupling has empty support."""


class SingularOnQuotientError(QuadotError):
    """The bordered operator is singular beyond the known gauge direction."""


class FactorizationFailureError(QuadotError):
    """Covariance eigenvalue below the PSD-repair threshold."""


class InvalidLevelError(QuadotError):
    """Confidence level outside (0, 1)."""


# --- experiments ---------------------------------------------------------------

class TooFewSamplesError(QuadotError):
    """Statistic requested on a sample that is too small."""


class DegenerateInputError(QuadotError):
    """Inputs outside the domain of a fit (e.g. zero errors in a log-log fit)."""
