"""Convolutional LSTM soft-attention models with a hierarchical temporal layer."""

from .cell import AttentionParams, CellState, ConvLSTMParams, attention_map, cell_step, step_backward
from .data import FeatureSequence, generate_sequence, load_manifest, read_features, write_features
from .model import (
    ChamConfig,
    ChamModel,
    backward_sequence,
    forward_sequence,
    predict,
    sequence_loss,
)
from .optim import AdamState, TrainConfig, adam_step, lr_schedule
from .training import grad_check, train_loop

__version__ = "0.1.0"
