"""Tensor/NN training engine: layers, models, training loop, persistence."""

from .io import load_model, save_model
from .layers import (
    ACTIVATION_KINDS,
    HE_FRIENDLY_KINDS,
    LAYER_KINDS,
    PARAMETERIZED_KINDS,
    AvgPool2D,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2D,
    PolyAct,
    ReLU,
    Sigmoid,
    Softmax,
    SquareAct,
    col2im,
    im2col,
    im2col_indices,
    layer_forward,
    layer_from_config,
    pool_indices,
    scatter_matrix,
)
from .model import Model
from .train import (
    Dataset,
    TrainConfig,
    TrainHistory,
    evaluate,
    train,
    training_step,
)

__all__ = [
    "ACTIVATION_KINDS", "HE_FRIENDLY_KINDS", "LAYER_KINDS", "PARAMETERIZED_KINDS",
    "AvgPool2D", "BatchNorm", "Conv2D", "Dense", "Dropout", "Flatten", "MaxPool2D",
    "PolyAct", "ReLU", "Sigmoid", "Softmax", "SquareAct",
    "Model", "Dataset", "TrainConfig", "TrainHistory",
    "col2im", "im2col", "im2col_indices", "pool_indices",
    "layer_forward", "layer_from_config", "scatter_matrix",
    "train", "training_step", "evaluate", "save_model", "load_model",
]
