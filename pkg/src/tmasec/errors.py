"""Exception hierarchy shared across the package."""


class TmaSecError(Exception):
    """Base class for every error raised by tmasec."""


class InvalidParamsError(TmaSecError, ValueError):
    """TMA parameters violate the ON-OFF design rules."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid TMA parameters: " + "; ".join(str(v) for v in self.violations))


class DegenerateCovarianceError(TmaSecError):
    """Sample covariance of the received frames is numerically singular."""


class NewtonDenominatorError(TmaSecError, ArithmeticError):
    """The approximate Newton step has a vanishing denominator."""


class CollapsedUnmixingError(TmaSecError, ArithmeticError):
    """Unmixing columns became linearly dependent."""


class NullDiagonalError(TmaSecError):
    """No null diagonal found while estimating the antenna count."""


class PhaseAmbiguityError(TmaSecError):
    """No unique (candidate, phase) pair survives the phase checks."""

    def __init__(self, message, survivors=()):
        self.survivors = list(survivors)
        super().__init__(message)


class IrreducibleAmbiguityError(PhaseAmbiguityError):
    """Several distinct TMA configurations explain the same observation."""


class DefyError(TmaSecError):
    """End-to-end attack failure, tagged with the stage that failed.

    ``partial`` holds a best-effort :class:`~tmasec.resolver.ResolvedAttack`
    when the pipeline got far enough to produce one.
    """

    def __init__(self, stage, cause, partial=None):
        self.stage = stage
        self.cause = cause
        self.partial = partial
        super().__init__(f"{stage}: {cause}")
