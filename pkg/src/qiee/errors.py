"""Exception hierarchy.

Every error raised on purpose by the package derives from ``QieeError`` so the
CLI can translate it into an exit code without swallowing programming errors.
"""


class QieeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(QieeError, ValueError):
    """Bad arguments, configuration or scenario identifiers."""

    exit_code = 2


class ArgumentError(UsageError):
    """A function argument violates its documented precondition."""


class SpecError(UsageError):
    """An estimand or learner specification is inconsistent with the data."""


class DataIntegrityError(QieeError, ValueError):
    """Input data cannot be trusted as given."""

    exit_code = 4


class SchemaError(DataIntegrityError):
    """A role refers to a column that does not exist."""


class ParseError(DataIntegrityError):
    """A cell could not be read as a number."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class IntegrityError(DataIntegrityError):
    """Values violate a dataset invariant (binary roles, missing outcomes)."""


class EstimabilityError(DataIntegrityError):
    """The data cannot support the requested estimand (empty cells)."""


class RuntimeInstabilityError(QieeError, RuntimeError):
    """Numerical procedures failed in a way that depends on the data draw."""

    exit_code = 3


class FitError(RuntimeInstabilityError):
    """A nuisance learner could not be fitted."""


class DegenerateLabelError(FitError):
    """Binary labels are all equal."""


class ConvergenceError(FitError):
    """Iterative fitting diverged or the data are separated."""


class SampleSizeError(FitError):
    """Too few rows for the learner."""


class VarianceDegeneracyError(FitError):
    """The fitted variance function is nonpositive everywhere."""


class CrossFitError(FitError):
    """A per-fold fit failed; names the fold and nuisance role."""

    def __init__(self, message, fold=None, role=None):
        super().__init__(message)
        self.fold = fold
        self.role = role


class EvaluationError(RuntimeInstabilityError):
    """A score produced non-finite values."""


class BracketingError(RuntimeInstabilityError):
    """No sign change of the estimating function inside the bracket."""

    def __init__(self, message, min_abs=None, theta_at_min=None):
        super().__init__(message)
        self.min_abs = min_abs
        self.theta_at_min = theta_at_min


class DegeneracyError(RuntimeInstabilityError):
    """A normalizer or standard error collapsed to zero."""


class InversionError(RuntimeInstabilityError):
    """The requested level lies outside the estimated CDF range."""


class PerturbationError(RuntimeInstabilityError):
    """A perturbed probability left the admissible range."""


class InstabilityError(RuntimeInstabilityError):
    """Too many replications or bootstrap draws failed."""
