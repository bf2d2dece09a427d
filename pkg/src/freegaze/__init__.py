"""Frequency-domain gaze representation learning at desk scale."""

__version__ = "0.1.0"


class DimensionError(ValueError):
    """Image or plane dimensions violate the block geometry."""


class DegenerateLandmarkError(ValueError):
    """Landmarks produce an empty periocular region."""


class GeometryError(ValueError):
    """Synthetic render parameters place features outside their container."""


class NonFiniteError(FloatingPointError):
    """A layer or loss produced NaN/inf."""
