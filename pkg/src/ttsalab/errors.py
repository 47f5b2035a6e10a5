"""Exception hierarchy shared by every module of the package."""


class TTSAError(Exception):
    """Base class for all package errors."""


class DimensionError(TTSAError, ValueError):
    pass


class ValidationError(TTSAError, ValueError):
    pass


class StabilityError(TTSAError):
    """A matrix that must have eigenvalues with positive real part does not.

    ``matrix`` names the offending block (``"J22"`` or ``"Delta"``) when known.
    """

    def __init__(self, message, matrix=None, margin=None):
        super().__init__(message)
        self.matrix = matrix
        self.margin = margin


class SingularityError(TTSAError):
    pass


class ErgodicityError(TTSAError):
    pass


class OracleInfeasibleError(TTSAError):
    def __init__(self, message, radius=None):
        super().__init__(message)
        self.radius = radius


class DesignError(TTSAError, ValueError):
    """Least-squares design matrix is rank deficient."""


class ResolutionError(TTSAError, ValueError):
    """Requested averaging window is not covered by the recorded indices."""


class PairingError(TTSAError, ValueError):
    pass


class ConditioningWarning(UserWarning):
    pass
