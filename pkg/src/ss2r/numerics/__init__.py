"""Minimal reverse-mode tensor engine (numpy backed) plus AdamW and checkpoints."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import NonFiniteGradient, OptimizerState, adamw_step
from .tensor import GradTape, ShapeError, Tensor, active_tape, as_tensor, backward, default_dtype, precision

__all__ = [
    "ops", "Tensor", "GradTape", "ShapeError", "backward", "precision", "default_dtype",
    "active_tape", "as_tensor", "OptimizerState", "adamw_step", "NonFiniteGradient",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
