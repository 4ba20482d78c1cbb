"""Recurrent adapters (READ) and partial video-language alignment (PVLA) at desk scale."""

from .adapters import LoraPatch, PlainAdapter, ReadAdapter, init_adapter_params, read_forward
from .autodiff import Tensor, backward, finite_diff_grad, no_grad
from .backbone import Backbone, ModelConfig, build_pretrained_backbone, forward_saliency
from .errors import (
    CompatibilityError,
    ConfigError,
    DatasetSpecError,
    DegenerateInputError,
    DimensionError,
    InfeasibleError,
    NumericError,
    ReadPvlaError,
    SizeError,
    TrainingError,
)
from .pot import SolverConfig, exact_partial_ot, pvla_loss, sinkhorn_partial
from .synth import DatasetSpec, average_precision, generate_dataset, mean_average_precision
from .trainer import FinetuneStrategy, TrainConfig, attach_strategy, evaluate_map, train_finetune

__all__ = [
    "Backbone",
    "CompatibilityError",
    "ConfigError",
    "DatasetSpec",
    "DatasetSpecError",
    "DegenerateInputError",
    "DimensionError",
    "FinetuneStrategy",
    "InfeasibleError",
    "LoraPatch",
    "ModelConfig",
    "NumericError",
    "PlainAdapter",
    "ReadAdapter",
    "ReadPvlaError",
    "SizeError",
    "SolverConfig",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "attach_strategy",
    "average_precision",
    "backward",
    "build_pretrained_backbone",
    "evaluate_map",
    "exact_partial_ot",
    "finite_diff_grad",
    "forward_saliency",
    "generate_dataset",
    "init_adapter_params",
    "mean_average_precision",
    "no_grad",
    "pvla_loss",
    "read_forward",
    "sinkhorn_partial",
    "train_finetune",
]
