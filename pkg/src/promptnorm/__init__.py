"""Soft-prompt tuning with prompt-norm regularizers on a synthetic frozen encoder."""

from promptnorm.autodiff import GradientTape, Tensor, backward, finite_difference_check
from promptnorm.encoders import FrozenEncoders, FrozenTask, build_encoders, generate_task
from promptnorm.harness import (FrequencyTable, RunReport, SweepGrid, TrainConfig,
                                corruption_sweep, count_low_norm_occurrences, multi_seed, train)
from promptnorm.losses import (OmegaSchedule, PANConfig, PUNConfig, ce_loss, pan_alphas,
                               pan_loss, pun_loss, total_loss)
from promptnorm.prompt import SoftPrompt, build_hybrid_set, prompt_norms, replace, rescale

__all__ = [
    "GradientTape", "Tensor", "backward", "finite_difference_check",
    "FrozenEncoders", "FrozenTask", "build_encoders", "generate_task",
    "FrequencyTable", "RunReport", "SweepGrid", "TrainConfig", "corruption_sweep",
    "count_low_norm_occurrences", "multi_seed", "train",
    "OmegaSchedule", "PANConfig", "PUNConfig", "ce_loss", "pan_alphas", "pan_loss", "pun_loss",
    "total_loss",
    "SoftPrompt", "build_hybrid_set", "prompt_norms", "replace", "rescale",
]
