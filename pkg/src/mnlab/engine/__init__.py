"""Minimal numpy compute layer: grouped convs, dense, norm, pooling, reverse-mode gradients."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    EVAL,
    TRAIN,
    EngineError,
    ForwardResult,
    ModelState,
    backward,
    forward,
    init_state,
    param_shapes,
    path_block,
    validate_state,
    zero_path,
)
from .ops import softmax_xent

__all__ = [
    "EVAL",
    "TRAIN",
    "CheckpointError",
    "EngineError",
    "ForwardResult",
    "ModelState",
    "backward",
    "forward",
    "init_state",
    "load_checkpoint",
    "param_shapes",
    "path_block",
    "save_checkpoint",
    "softmax_xent",
    "validate_state",
    "zero_path",
]
