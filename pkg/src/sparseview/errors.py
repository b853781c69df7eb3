"""Exception taxonomy shared across the toolkit.

The CLI maps these onto process exit codes; library callers catch them
directly.
"""


class SparseViewError(Exception):
    """Base class for all toolkit errors."""


class DatasetError(SparseViewError):
    """A dataset failed to load or validate.

    Carries the offending file and field so load failures are actionable.
    """

    def __init__(self, message: str, *, file: str = "", field: str = ""):
        self.file = file
        self.field = field
        parts = [message]
        if file:
            parts.append(f"file={file}")
        if field:
            parts.append(f"field={field}")
        super().__init__(" | ".join(parts))


class GeometryError(SparseViewError):
    """Degenerate geometric input (behind-camera point, non-positive depth)."""


class AlignmentError(SparseViewError):
    """Depth alignment could not be fitted."""


class FusionError(SparseViewError):
    """The depth blending solve failed."""

    def __init__(self, message: str, *, residual: float | None = None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (final residual {residual:.3e})"
        super().__init__(message)


class OracleError(SparseViewError):
    """Base class for oracle transport and protocol failures."""


class OracleUnavailableError(OracleError):
    """The oracle endpoint could not be reached within the retry budget."""


class OracleProtocolError(OracleError):
    """The oracle returned a response violating the wire contract."""


class PathFitError(SparseViewError):
    """Novel-camera path fitting failed; a manual path file may be needed."""


class PipelineOrderError(SparseViewError):
    """A pipeline stage was invoked before its prerequisites exist."""


class OptimizationError(SparseViewError):
    """The optimization loop aborted (e.g. non-finite loss)."""


class EvaluationError(SparseViewError):
    """Evaluation inputs are inconsistent (mismatched image sets)."""
