"""Quantile day-ahead forecaster: model, training, windows, serialization."""

from .model import (
    ForecastSample,
    ModelConfig,
    ModelWeights,
    QuantileForecast,
    ShapeError,
    evaluate_pinball,
    forward,
    forward_batch,
    init_model,
    loss_and_gradients,
    parameter_spec,
    stack_samples,
)
from .samples import HistoryError, build_training_samples, inference_sample, midnight_indices
from .train import (
    DivergenceError,
    EpochRecord,
    TrainConfig,
    default_finetune_config,
    finetune,
    train,
    write_history_csv,
)
from .weights_io import (
    WeightChecksumError,
    WeightFormatError,
    WeightVersionError,
    load_weights,
    save_weights,
)

__all__ = [
    "ForecastSample",
    "ModelConfig",
    "ModelWeights",
    "QuantileForecast",
    "ShapeError",
    "HistoryError",
    "DivergenceError",
    "EpochRecord",
    "TrainConfig",
    "WeightChecksumError",
    "WeightFormatError",
    "WeightVersionError",
    "build_training_samples",
    "default_finetune_config",
    "evaluate_pinball",
    "finetune",
    "forward",
    "forward_batch",
    "inference_sample",
    "init_model",
    "load_weights",
    "loss_and_gradients",
    "midnight_indices",
    "parameter_spec",
    "save_weights",
    "stack_samples",
    "train",
    "write_history_csv",
]
