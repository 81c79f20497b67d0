"""Adversarial protection of images against diffusion-model personalization.

Everything runs at desk scale: a small conditional latent diffusion model
with an explicit mid-block, PGD-based image protection restricted to chosen
parameter subsets, few-shot personalization harnesses, purification
transforms, and a metric suite tying them together.
"""

from .attack import (AttackConfig, AttackError, MaskKind, ParameterMask, Perturbation,
                     attack_step, count_masked_parameters, pgd_project, run_attack)
from .core import (DiffusionModel, ModelConfig, build_schedule, ldm_loss,
                   load_checkpoint, predict_noise, q_sample, sample, save_checkpoint, sdedit)
from .personalize import (AdapterWeights, FinetuneConfig, FinetuneMode,
                          finetune_attention, finetune_lowrank, generate_personalized)
from .purify import PurifyKind, PurifySpec, purify

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackError", "MaskKind", "ParameterMask", "Perturbation",
    "attack_step", "count_masked_parameters", "pgd_project", "run_attack",
    "DiffusionModel", "ModelConfig", "build_schedule", "ldm_loss",
    "load_checkpoint", "predict_noise", "q_sample", "sample", "save_checkpoint", "sdedit",
    "AdapterWeights", "FinetuneConfig", "FinetuneMode",
    "finetune_attention", "finetune_lowrank", "generate_personalized",
    "PurifyKind", "PurifySpec", "purify",
    "__version__",
]
