"""Exception hierarchy. The CLI maps each class to its own exit code."""


class ArPlaybackError(Exception):
    pass


class FormatError(ArPlaybackError, ValueError):
    """An input file could not be parsed."""


class ValidationError(ArPlaybackError, ValueError):
    """Inputs violate a documented precondition."""


class InsufficientDetectionsError(ArPlaybackError):
    """Too few fiducial detections to attempt registration."""


class DegenerateConfigurationError(ArPlaybackError):
    """Point geometry does not constrain the pose (collinear, coincident...)."""


class InsufficientDataError(ArPlaybackError):
    """Too few motion pairs or point pairs for a solve."""


class UnobservableTranslationError(ArPlaybackError):
    """Hand-eye rotation axes are (near) parallel; translation is not observable."""


class NoConsensusError(ArPlaybackError):
    """RANSAC could not find a hypothesis with enough inliers."""
