"""Exception types raised across the simulator.

Every error derives from ``FedVCError`` and from the closest builtin, so
``except ValueError`` in calling code keeps working.
"""

from __future__ import annotations


class FedVCError(Exception):
    """Base class for all simulator errors."""


class ShapeError(FedVCError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shown}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class ParamError(FedVCError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConceptError(FedVCError, ValueError):
    pass


class LossError(FedVCError, ValueError):
    pass


class ProtocolError(FedVCError, RuntimeError):
    pass


class RoundAborted(FedVCError, RuntimeError):
    pass


class PartitionError(FedVCError, ValueError):
    pass


class IdxFormatError(FedVCError, ValueError):
    def __init__(self, path: str, offset: int, message: str) -> None:
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: {message} at byte offset {offset}")


class MetricsError(FedVCError, ValueError):
    pass


class ConfigError(FedVCError, ValueError):
    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class CheckpointError(FedVCError, ValueError):
    pass
