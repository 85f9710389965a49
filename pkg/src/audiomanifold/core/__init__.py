"""Differentiable building blocks: layers, Adam, grad checking, checkpoints, training loop."""
from .checkpoint import CheckpointError, atomic_directory, load_optimizer, load_state, read_metadata, save_checkpoint
from .gradcheck import grad_check
from .layers import (
    LAYER_KINDS, BatchNorm, Dense, Dropout, GlobalAvgPool, ResidualBlock, ShapeError, StridedConv,
    TransposedConv, build_layer,
)
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .training import PlateauStopper, TrainingDivergedError, TrainResult, batch_indices, fit

__all__ = [
    "Adam", "AdamState", "BatchNorm", "CheckpointError", "Dense", "Dropout", "GlobalAvgPool",
    "LAYER_KINDS", "NonFiniteGradientError", "PlateauStopper", "ResidualBlock", "ShapeError",
    "StridedConv", "TrainResult", "TrainingDivergedError", "TransposedConv", "adam_step",
    "atomic_directory", "batch_indices", "build_layer", "fit", "grad_check", "load_optimizer",
    "load_state", "read_metadata", "save_checkpoint",
]
