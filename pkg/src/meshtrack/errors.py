"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2, NumericalError
(and subclasses) -> 3, FileFormatError and OSError -> 4.
"""


class MeshtrackError(Exception):
    """Base class for all package errors."""


class ValidationError(MeshtrackError):
    """Invalid argument, configuration, or input data."""


class FileFormatError(MeshtrackError):
    """A file could not be parsed as the expected format."""


class NumericalError(MeshtrackError):
    """A numerical computation failed or is ill-posed."""


class DegenerateGeometryError(NumericalError):
    """Input geometry is degenerate (coincident/collinear points, empty bounds)."""


class SolverError(NumericalError):
    """A linear solve failed or produced an unusable result."""

    def __init__(self, message, deficient_blocks=None):
        super().__init__(message)
        self.deficient_blocks = list(deficient_blocks) if deficient_blocks else []


class TrackingError(MeshtrackError):
    """A tracking stage failed; carries the frame, stage, and partial results."""

    def __init__(self, message, frame_index, stage, partial_result=None):
        super().__init__(message)
        self.frame_index = frame_index
        self.stage = stage
        self.partial_result = partial_result
