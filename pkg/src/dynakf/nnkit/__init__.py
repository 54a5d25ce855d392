"""MLPs, an LSTM cell, Adam, and checkpoint files."""

from .adam import AdamState, NonFiniteGradientError, adam_step
from .checkpoint import (
    Checkpoint,
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .lstm import LstmCellParams, LstmState, lstm_gates, lstm_step
from .mlp import Dense, MlpParams, activate, glorot_uniform, mlp_forward

__all__ = [
    "AdamState", "NonFiniteGradientError", "adam_step",
    "Checkpoint", "CheckpointError", "CheckpointCorruptError", "CheckpointVersionError",
    "load_checkpoint", "save_checkpoint",
    "LstmCellParams", "LstmState", "lstm_gates", "lstm_step",
    "Dense", "MlpParams", "activate", "glorot_uniform", "mlp_forward",
]
