"""Exception types shared across the package."""


class AsnlocError(Exception):
    """Base class for all package-specific failures."""


class GeometryError(AsnlocError):
    """A position lies outside the room or violates array geometry."""


class ReverberationError(AsnlocError):
    """Requested decay time is physically infeasible for the room."""


class PlacementError(AsnlocError):
    """A node displacement could not be placed inside the room."""


class InsufficientDataError(AsnlocError):
    """Not enough samples to perform the requested computation."""


class DegenerateExcitationError(AsnlocError):
    """Source signal did not excite the analysis band."""


class ConditioningError(AsnlocError):
    """Covariance factorization failed even after jitter escalation."""


class IncompleteObservationError(AsnlocError):
    """A feature vector is missing for a node the model requires."""


class TuningError(AsnlocError):
    """No hyperparameter grid point produced a usable model."""


class CapacityError(AsnlocError):
    """Problem size exceeds what exact enumeration supports."""


class DegenerateMessageError(AsnlocError):
    """A belief-propagation message collapsed to all zeros."""


class StateError(AsnlocError):
    """Operation invoked before its required state was recorded."""


class FittingError(AsnlocError):
    """Iterative fitting did not converge within its iteration budget."""


class CalibrationError(AsnlocError):
    """Calibration data lacks a required latent class."""


class UndefinedAucError(AsnlocError):
    """ROC/AUC requested on a single-class record set."""


class ConfigError(AsnlocError):
    """Scenario, model, or detector configuration is invalid or mismatched."""
