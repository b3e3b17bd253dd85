"""Exception and warning types used across the package."""


class MultisemError(Exception):
    """Base class for all package errors."""


class SpecError(MultisemError):
    """Structural problem in a model specification (dimensions, names, symmetry)."""


class OverParameterizedError(SpecError):
    """More free parameters than sample moments (negative degrees of freedom)."""


class DataError(MultisemError):
    """Malformed or inconsistent input data."""


class InsufficientDataError(DataError):
    """A sample has fewer than two observations."""


class NotPositiveDefiniteError(MultisemError):
    """An implied covariance matrix is not positive definite."""


class StartValueError(MultisemError):
    """No feasible starting point could be constructed."""


class IdentificationError(MultisemError):
    """Rank-deficient Jacobian; the model is not locally identified."""

    def __init__(self, message, directions=None):
        super().__init__(message)
        self.directions = directions or []


class EvaluationError(MultisemError):
    """Non-finite values encountered while evaluating model quantities."""


class TestUndefinedError(MultisemError):
    """Overall-fit test requested for a model with zero degrees of freedom."""


class UnavailableMomentsError(MultisemError):
    """A correction requires fourth-moment estimates that were not supplied."""


class AnchorDesignationError(MultisemError):
    """A designated anchor variable does not satisfy the loading/error conditions."""


class WrongModeError(MultisemError):
    """Correction applied under the wrong latent-variable mode (fixed vs random)."""


class SingularCovarianceWarning(UserWarning):
    """A sample covariance matrix is singular or nearly so."""


class NegativeVarianceClipWarning(UserWarning):
    """A corrected variance came out negative and was clipped at zero."""


class SparsePairingWarning(UserWarning):
    """A cross-sample block has at most one shared individual and was zeroed."""
