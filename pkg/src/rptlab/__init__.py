"""Prompt tuning and residual prompt reparameterization on a tiny numpy transformer."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DimensionError, LengthError, NumericError, RPTError
from .tensor import Parameter, Tensor, grad_check, no_grad
from .backbone import Backbone, BackboneConfig, freeze
from .reparam import (PromptBank, ReparamNet, ReparamSpec, apply_reparam, bake, count_params, init_prompt,
                      load_prompt, save_prompt)
from .model import PromptModel
from .optim import AdamW, AdamWConfig, OptimState, adamw_step
from .trainer import (MetricsRecord, TrainConfig, TrainResult, evaluate, few_shot_subset, fine_tune_mode,
                      train_loop)
from .tasks import Example, TaskSpec, Verbalizer, generate_suite, generate_task
from .pretrain import pretrain_backbone

__all__ = [
    "__version__",
    "RPTError", "ConfigError", "ContractError", "DimensionError", "LengthError", "NumericError",
    "Tensor", "Parameter", "grad_check", "no_grad",
    "Backbone", "BackboneConfig", "freeze", "pretrain_backbone",
    "PromptBank", "ReparamSpec", "ReparamNet", "init_prompt", "apply_reparam", "bake", "count_params",
    "save_prompt", "load_prompt",
    "PromptModel", "AdamW", "AdamWConfig", "OptimState", "adamw_step",
    "TrainConfig", "TrainResult", "MetricsRecord", "train_loop", "evaluate", "few_shot_subset", "fine_tune_mode",
    "Example", "TaskSpec", "Verbalizer", "generate_task", "generate_suite",
]
