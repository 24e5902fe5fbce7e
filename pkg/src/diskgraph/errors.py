"""Exception types shared across the engine.

The CLI maps these onto process exit codes: config/argument problems -> 2,
infeasible layouts or storage plans -> 3, malformed data files -> 4.
"""


class DiskGraphError(Exception):
    """Base class for engine errors."""


class FormatError(DiskGraphError):
    """A data file does not match its declared binary format."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class LayoutInfeasibleError(DiskGraphError):
    """The requested page layout cannot fit its records into one page."""


class PlanInfeasibleError(DiskGraphError):
    """The requested storage plan does not fit the memory budget."""

    def __init__(self, message: str, recommended: str | None = None):
        super().__init__(message)
        self.recommended = recommended


class IndexCorruptionError(DiskGraphError):
    """Persisted index state is internally inconsistent."""
