"""Exception types shared across the package."""


class ShirError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(ShirError, ValueError):
    """Caller broke a precondition (dimension mismatch, bad argument)."""


class DataError(ShirError, ValueError):
    """Invalid data: bad response coding, non-finite entries, mixed dimensions."""


class NumericOverflowError(ShirError, ArithmeticError):
    """A non-finite value appeared mid-computation.

    ``index`` points at the first offending observation or coefficient.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceError(ShirError, RuntimeError):
    """A solver ran out of iterations; carries the last optimality residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularityError(ShirError, ValueError):
    """A matrix that must be invertible is (numerically) singular."""


class DegenerateFoldError(ShirError, ValueError):
    """A cross-validation fold has a single-class response even after resampling."""


class SiteError(ShirError, RuntimeError):
    """A per-site computation failed (e.g. separation in a screened MLE)."""

    def __init__(self, message, site_id=None):
        super().__init__(message)
        self.site_id = site_id


class EnvelopeError(ShirError, ValueError):
    """Base class for wire-format decode failures."""


class BadMagicError(EnvelopeError):
    pass


class UnsupportedVersionError(EnvelopeError):
    pass


class ChecksumError(EnvelopeError):
    pass


class TruncationError(EnvelopeError):
    pass
