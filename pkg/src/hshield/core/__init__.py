from .schedule import NoiseSchedule, build_schedule
from .autoencoder import PatchAutoencoder
from .text import Vocabulary, PromptEmbedding, default_vocabulary
from .model import DiffusionModel, ModelConfig, Manifest, q_sample, ldm_loss, predict_noise
from .sampling import sample, sdedit
from .checkpoint import save_checkpoint, load_checkpoint, state_hash

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "PatchAutoencoder",
    "Vocabulary",
    "PromptEmbedding",
    "default_vocabulary",
    "DiffusionModel",
    "ModelConfig",
    "Manifest",
    "q_sample",
    "ldm_loss",
    "predict_noise",
    "sample",
    "sdedit",
    "save_checkpoint",
    "load_checkpoint",
    "state_hash",
]
