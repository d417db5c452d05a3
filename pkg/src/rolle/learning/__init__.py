"""From-scratch CNN: layers, training loop, augmentation, serialization."""

from .augment import augment_flip, augment_shadow
from .generator import (
    EmptyDatasetError,
    FrameCache,
    Hyperparams,
    batch_generator,
    batches_per_epoch,
)
from .model import (
    CorruptModelError,
    IncompatibleModelError,
    Model,
    ModelSpec,
    NumericDivergenceError,
    ShapeError,
    forward,
    gradient_check,
    init_model,
    load_model,
    loss_and_grad,
    pilotnet_spec,
    reduced_spec,
    save_model,
)
from .train import TrainDivergenceError, TrainHistory, load_history, save_history, train

__all__ = [
    "CorruptModelError",
    "EmptyDatasetError",
    "FrameCache",
    "Hyperparams",
    "IncompatibleModelError",
    "Model",
    "ModelSpec",
    "NumericDivergenceError",
    "ShapeError",
    "TrainDivergenceError",
    "TrainHistory",
    "augment_flip",
    "augment_shadow",
    "batch_generator",
    "batches_per_epoch",
    "forward",
    "gradient_check",
    "init_model",
    "load_history",
    "load_model",
    "loss_and_grad",
    "pilotnet_spec",
    "reduced_spec",
    "save_history",
    "save_model",
    "train",
]
