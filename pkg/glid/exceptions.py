"""
Exception hierarchy for the GLID toolkit

Every error carries the structured fields a caller needs to report it
(which op, which parameter, which config field) instead of only a message.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple


class GlidError(Exception):
    """Base class for all toolkit errors"""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class ShapeError(GlidError):
    """Operand shapes do not conform for an op"""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ''):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shape_text = ' vs '.join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class UnknownOpError(GlidError):
    """Requested op id is not registered"""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"Unknown op: {op}")


class ConfigError(GlidError):
    """Invalid run configuration; collects every problem found"""

    def __init__(self, message: str, field: str = None, errors: List[str] = None):
        self.field = field
        self.errors = errors or []
        super().__init__(message)

    def __str__(self) -> str:
        if not self.errors:
            return self.message
        return self.message + ': ' + '; '.join(self.errors)


class MaskError(GlidError):
    """Invalid masking request"""


class TaskError(GlidError):
    """Task id or task combination not supported"""


class NumericError(GlidError):
    """NaN/Inf found in a loss or gradient"""

    def __init__(self, message: str, step: Optional[int] = None, parameter: Optional[str] = None):
        self.step = step
        self.parameter = parameter
        super().__init__(message)


class CheckpointError(GlidError):
    """Checkpoint file is corrupt, truncated or of an unknown version"""

    def __init__(self, message: str, path: Any = None):
        self.path = str(path) if path is not None else None
        super().__init__(message)


class PolicyError(GlidError):
    """Checkpoint does not provide what a load policy requires"""

    def __init__(self, message: str, missing: List[str] = None, mismatched: Dict[str, Any] = None):
        self.missing = missing or []
        self.mismatched = mismatched or {}
        super().__init__(message)

    def __str__(self) -> str:
        parts = [self.message]
        if self.missing:
            parts.append('missing: ' + ', '.join(self.missing))
        if self.mismatched:
            parts.append('shape mismatch: ' + ', '.join(
                f"{name} {shapes[0]} != {shapes[1]}" for name, shapes in self.mismatched.items()))
        return '; '.join(parts)
