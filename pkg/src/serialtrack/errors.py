"""Exception types raised by the tracking pipeline.

Every error carries a stable ``code`` string so batch runs can record
machine-readable failure causes in their summaries.
"""


class SerialTrackError(Exception):
    """Base class for all pipeline errors."""

    code = "Error"


class InfeasibleDensity(SerialTrackError):
    """Requested particle count cannot be packed at the minimum spacing."""

    code = "InfeasibleDensity"


class DimMismatch(SerialTrackError):
    """Operands have different spatial dimensionality."""

    code = "DimMismatch"


class TooFewNeighbors(SerialTrackError):
    """A particle has too few neighbors to build a descriptor."""

    code = "TooFewNeighbors"


class NoSamples(SerialTrackError):
    """Gridding was requested with zero valid displacement samples."""

    code = "NoSamples"


class SolverDiverged(SerialTrackError):
    """Iterative linear solve failed to reach the residual tolerance."""

    code = "SolverDiverged"


class EmptyAfterRemoval(SerialTrackError):
    """Ghost removal left one of the particle sets empty."""

    code = "EmptyAfterRemoval"


class NoMatches(SerialTrackError):
    """Tracking ended with zero matched particles at the final neighbor count."""

    code = "NoMatches"


class DetectionCollapse(SerialTrackError):
    """Re-detection on a warped image yielded too few particles to continue."""

    code = "DetectionCollapse"


class OddFrameCount(SerialTrackError):
    """Double-frame pairing requires an even number of frames."""

    code = "OddFrameCount"


class GridTooSmall(SerialTrackError):
    """Gradient stencils need at least three nodes per axis."""

    code = "GridTooSmall"


class SingularF(SerialTrackError):
    """Polar decomposition of a (near-)singular deformation gradient."""

    code = "SingularF"


class ConfigInvalid(SerialTrackError):
    """Run configuration failed validation."""

    code = "ConfigInvalid"


class InputMissing(SerialTrackError):
    """A referenced input file does not exist or does not parse."""

    code = "InputMissing"
