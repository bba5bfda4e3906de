"""From-scratch neural forecasters."""

from .bundle import load, save
from .layers import gru_cell_step, lstm_cell_step
from .network import (
    NetConfig,
    NetParams,
    Network,
    TrainingError,
    build_layers,
    predict,
    predict_batch,
    tcn_forward,
    train,
    train_arrays,
)

__all__ = [
    "NetConfig", "NetParams", "Network", "TrainingError", "build_layers", "gru_cell_step",
    "load", "lstm_cell_step", "predict", "predict_batch", "save", "tcn_forward", "train", "train_arrays",
]
