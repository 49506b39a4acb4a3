"""Exception hierarchy.

DataError covers anything caused by the content of user inputs (bad
dimensions, degenerate statistics); ConfigMismatchError covers artifacts
that do not fit together (e.g. an SMS surface scored against a bundle
built for a different window).  The CLI maps these onto distinct exit
codes.
"""


class TexspcError(Exception):
    """Base class for all texspc errors."""


class DataError(TexspcError):
    """Input data cannot be processed as requested."""


class ZeroVarianceError(DataError):
    """Image is constant; standardization is undefined."""


class OutOfInteriorBoundsError(DataError):
    """Requested neighborhood extends past the image border."""


class ImageTooSmallError(DataError):
    """Image has no interior pixels for the requested neighborhood/window."""


class DimensionMismatchError(DataError):
    """Array sizes disagree with what the model or bundle expects."""


class InsufficientTailError(DataError):
    """Too few residuals for the requested tail-fitting probability."""


class DegenerateTailError(DataError):
    """Tail observations are identical; exponential rate would be zero."""


class WindowTooLargeError(DataError):
    """Moving window does not fit inside the residual image."""


class EmptyValidRegionError(DataError):
    """No pixel has a full moving window; monitoring is impossible."""


class InsufficientPhaseIError(DataError):
    """Calibration requires at least one in-control image."""


class PlacementOutOfBoundsError(DataError):
    """Injected defect does not fit inside the image."""


class ConstantFieldError(DataError):
    """Constant field cannot be rescaled to a greyscale range."""


class ConfigMismatchError(TexspcError):
    """Artifacts built with incompatible configurations were combined."""
