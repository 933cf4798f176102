"""Exception hierarchy shared across the package."""


class PathnavError(Exception):
    """Base class for all package errors."""


class ConfigError(PathnavError):
    """Invalid run configuration or config file."""


class SlideFormatError(PathnavError):
    """Missing, truncated, or structurally invalid pyramid container."""


class DegenerateSlideError(PathnavError):
    """Tissue foreground below the minimum usable fraction."""


class RegionError(PathnavError):
    """Region request invalid for the slide (level or size out of range)."""


class SpecValidationError(PathnavError):
    """Synthetic slide spec violates its own invariants."""


class CapacityError(PathnavError):
    """Rejection sampling could not place the requested number of points."""


class GrammarError(PathnavError):
    """Policy response does not match the expected output grammar."""


class CoordinateRangeError(PathnavError):
    """Parsed coordinate or level outside the admissible range."""


class OffCandidateError(PathnavError):
    """Proposal-round decision not close to any listed candidate."""


class TransportError(PathnavError):
    """Chat endpoint unreachable after retries."""


class CacheMissError(PathnavError):
    """Request not present in a frozen response cache."""


class EmptyEvidenceError(PathnavError):
    """Navigation terminated before extracting any region."""


class NavigationError(PathnavError):
    """Navigation failed mid-run; partial trajectory attached when available."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DuplicateSelectionError(PathnavError):
    """Single-turn selection repeated an already chosen candidate."""


class TaskError(PathnavError):
    """Task runner could not obtain an admissible answer."""


class UnmatchedCasesError(PathnavError):
    """Prediction/ground-truth join on case id is not total."""


class MetricUndefinedError(PathnavError):
    """Metric has no defined value on the given inputs."""


class DimensionMismatchError(PathnavError):
    """Embedding or parameter dimensions do not agree."""
