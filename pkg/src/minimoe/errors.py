"""Exception hierarchy shared by every minimoe module."""
from typing import Optional


class MiniMoEError(Exception):
    """Base class for all errors raised by minimoe."""


class ContractError(MiniMoEError):
    """A precondition of an operation was violated by its inputs."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, left_shape, right_shape):
        self.op = op
        self.left_shape = tuple(left_shape)
        self.right_shape = tuple(right_shape)
        super().__init__(f"{op}: incompatible shapes {self.left_shape} and {self.right_shape}")


class ConfigError(MiniMoEError):
    """A configuration, plan or experiment spec is invalid."""


class SelectorError(MiniMoEError):
    """A parameter selector matched nothing."""


class CheckpointError(MiniMoEError):
    """A checkpoint file is malformed or incompatible."""


class StageError(MiniMoEError):
    """A pipeline stage failed; carries where it failed."""

    def __init__(self, message: str, stage_index: Optional[int] = None, annotation: Optional[str] = None):
        self.stage_index = stage_index
        self.annotation = annotation
        prefix = []
        if stage_index is not None:
            prefix.append(f"stage {stage_index}")
        if annotation:
            prefix.append(annotation)
        label = f"[{', '.join(prefix)}] " if prefix else ""
        super().__init__(f"{label}{message}")


class TrainingDivergedError(StageError):
    """Loss became NaN/Inf; `last_good_checkpoint` points at the retained file."""

    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None, **kwargs):
        self.last_good_checkpoint = last_good_checkpoint
        super().__init__(message, **kwargs)
