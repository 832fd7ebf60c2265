"""Exception hierarchy shared by every btba module."""


class BTBAError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(BTBAError, ValueError):
    pass


class CovarianceError(BTBAError, ValueError):
    pass


class SingularCovError(CovarianceError):
    pass


class DesignError(BTBAError, ValueError):
    pass


class StartError(BTBAError, ValueError):
    pass


class NearZeroTruth(BTBAError, ZeroDivisionError):
    """Relative bias requested for a true value too close to zero."""

    def __init__(self, truth, zero_guard):
        self.truth = truth
        self.zero_guard = zero_guard
        super().__init__(
            f"relative bias is unstable for truth={truth!r} (|truth| < {zero_guard:g})"
        )


class EmptySample(BTBAError, ValueError):
    pass


class ZeroRmse(BTBAError, ZeroDivisionError):
    """All estimates equal the truth, so Z* is undefined (exactly unbiased)."""


class DegenerateSample(BTBAError, ValueError):
    pass


class LayoutError(BTBAError, ValueError):
    pass


class MissingCell(BTBAError, KeyError):
    pass


class ConfigError(BTBAError, ValueError):
    pass
