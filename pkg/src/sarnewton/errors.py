"""Exception hierarchy shared across the package.

Two broad families matter to callers: configuration/validation problems
(bad designs, malformed files, schema violations) and numerical failures
(singular matrices, undefined objectives, failed optimizations).  The CLI
maps the first family to exit code 2 and the second to exit code 3.
"""


class SarError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SarError):
    """Bad inputs detected before any numerical work starts."""


class InvalidDesignError(ValidationError):
    """A weight-matrix or simulation design violates its preconditions."""


class ConfigError(ValidationError):
    """Malformed configuration file, unknown key, or bad flag value."""


class NumericalError(SarError):
    """Numerical failure during estimation or inference."""


class SingularModelError(NumericalError):
    """S(lambda) = I - sum_i lambda_i W_i is singular."""


class NonpositiveDeterminantError(NumericalError):
    """det S(lambda) <= 0: the pseudo-likelihood is undefined there.

    Distinct from :class:`SingularModelError` so that search and
    Monte Carlo callers can tell an undefined objective apart from a
    factorization breakdown.
    """


class ConditioningError(NumericalError):
    """A Gram matrix required by a closed-form estimator is singular."""


class WeakInstrumentError(NumericalError):
    """The projected design matrix Q is numerically singular."""


class UnderIdentificationError(ValidationError):
    """Fewer instruments than spatial lag parameters."""


class NewtonStepError(NumericalError):
    """The Hessian solve of a Newton step failed."""


class OptimizationFailureError(NumericalError):
    """The reference PMLE search found no admissible minimizer."""


class DegenerateInferenceError(NumericalError):
    """A standard error of zero makes a t-statistic undefined."""
