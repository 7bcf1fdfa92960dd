"""Exception hierarchy.

Every error raised by the package derives from :class:`FusionError`. The CLI
maps the three mid-level families (:class:`InputError`, :class:`FitError`,
:class:`InferenceError`) onto exit codes 1, 2 and 3.
"""


class FusionError(Exception):
    """Base class for all package errors."""


class InputError(FusionError):
    """Malformed input data or configuration."""


class FitError(FusionError):
    """A nuisance model or estimating equation could not be fitted."""


class InferenceError(FusionError):
    """Variance estimation or pooling failed."""


# data loading
class MissingColumn(InputError):
    pass


class MalformedCell(InputError):
    pass


class PatternViolation(InputError):
    pass


class EmptySource(InputError):
    pass


class LayoutMismatch(InputError):
    pass


class DimensionMismatch(InputError):
    pass


# fitting
class RankDeficient(FitError):
    pass


class Separation(FitError):
    pass


class NoConvergence(FitError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SingularJacobian(FitError):
    pass


class DegenerateVariance(FitError):
    pass


class IllConditionedGram(FitError):
    pass


# inference
class SingularBread(InferenceError):
    pass


class TooManyFailures(InferenceError):
    pass
