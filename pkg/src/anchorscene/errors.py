"""Exception hierarchy shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class InputError(EngineError):
    """A caller-supplied value violates a documented precondition."""


class GeometryError(EngineError):
    """Geometric operation failed (e.g. a ray escaped a non-watertight mesh)."""

    def __init__(self, message: str, pixel: tuple[int, int] | None = None):
        if pixel is not None:
            message = f"{message} (pixel row={pixel[0]}, col={pixel[1]})"
        super().__init__(message)
        self.pixel = pixel


class PlacementError(EngineError):
    """Procedural furniture placement exhausted its retry budget."""


class DegeneracyError(EngineError):
    """A fit or normalization has no unique solution (rank deficiency, zero std)."""


class AdapterError(EngineError):
    """A model adapter call failed; carries transport/status context."""

    def __init__(self, message: str, status: int | None = None, step: int | None = None):
        parts = [message]
        if status is not None:
            parts.append(f"status={status}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(" ".join(parts))
        self.status = status
        self.step = step


class ParseError(EngineError):
    """A serialized artifact (PLY, JSON response) could not be decoded."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class StageError(EngineError):
    """A pipeline stage aborted; wraps the failing view for context."""

    def __init__(self, stage: str, view_index: int | None, cause: Exception):
        at = "" if view_index is None else f" at view {view_index}"
        super().__init__(f"stage '{stage}' failed{at}: {cause}")
        self.stage = stage
        self.view_index = view_index
        self.cause = cause
