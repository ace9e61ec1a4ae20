"""Exception types shared across the library."""


class DynRefineError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(DynRefineError):
    """A depth value or transformed z-coordinate was required to be positive."""


class DegenerateConfiguration(DynRefineError):
    """Point configuration is rank-deficient (e.g. collinear trajectory)."""


class DimensionMismatch(DynRefineError):
    """Array dimensions disagree across frames, instances, or inputs."""


class ParseError(DynRefineError):
    """A manifest, raster, or track file could not be parsed.

    Carries the offending file and the byte offset where parsing failed.
    """

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path}@{self.offset}: {message}")


class ValidationError(DynRefineError):
    """Data to be written or consumed violates its invariants."""


class IoError(DynRefineError):
    """Filesystem failure while writing outputs."""


class EmptyTrack(DynRefineError):
    """A track operation was given no points."""


class TrackTooShort(DynRefineError):
    """Track has fewer points than the operation requires."""


class WindowTooShort(DynRefineError):
    """Sliding window has fewer frames (or flows) than required."""


class DivergenceDetected(DynRefineError):
    """Optimization objective became non-finite."""


class DegenerateRay(DynRefineError):
    """A ray offset pushed a track point onto or behind its camera center."""


class EmptyValidSet(DynRefineError):
    """Metric evaluation received no valid pixels."""


class SpecValidationError(DynRefineError):
    """Synthetic scene specification is invalid."""
