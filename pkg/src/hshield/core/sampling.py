"""Deterministic sampling and image-to-image editing loops."""

import torch
from torch import Tensor

from .model import DiffusionModel, predict_noise, q_sample
from .text import PromptEmbedding


def _ddim_steps(t_start: int, n_steps: int) -> list:
    """Evenly spaced 1-based timesteps from t_start down, ending at 1."""
    if n_steps >= t_start:
        return list(range(t_start, 0, -1))
    ts = torch.linspace(t_start, 1, n_steps).round().long().tolist()
    # deduplicate while preserving descending order
    out = []
    for t in ts:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


def denoise_latents(model: DiffusionModel, z: Tensor, t_start: int, cond: PromptEmbedding,
                    n_steps: int) -> Tensor:
    """Deterministic reverse process from z at t_start down to t=0."""
    sched = model.schedule
    timesteps = _ddim_steps(t_start, n_steps)
    for i, t in enumerate(timesteps):
        a_t = sched.alpha_bar(t)
        a_prev = sched.alpha_bar(timesteps[i + 1]) if i + 1 < len(timesteps) else torch.tensor(1.0)
        eps_pred = predict_noise(model, z, t, cond)
        z0_pred = (z - torch.sqrt(1.0 - a_t) * eps_pred) / torch.sqrt(a_t)
        z = torch.sqrt(a_prev) * z0_pred + torch.sqrt(1.0 - a_prev) * eps_pred
    return z


def sample(model: DiffusionModel, cond: PromptEmbedding, n_steps: int = 30,
           seed: int = 0) -> Tensor:
    """Generate one image from noise; deterministic given the seed.

    Returns a (3, H, W) tensor clamped to [0, 1].
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    shape = model.autoencoder.latent_shape(model.config.image_size)
    z = torch.randn(shape, generator=gen)
    with torch.no_grad():
        z = denoise_latents(model, z, model.schedule.T, cond, n_steps)
        x = model.autoencoder.decode(z)
    return x.clamp(0.0, 1.0)


def sdedit(model: DiffusionModel, x: Tensor, cond: PromptEmbedding, strength: float,
           seed: int = 0, n_steps: int = 30) -> Tensor:
    """Edit an image by partially noising it and denoising under the prompt.

    strength in (0, 1] controls the noising depth t = round(strength * T);
    strength -> 0 returns a near-copy of the input.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")
    gen = torch.Generator().manual_seed(seed)
    t_start = max(1, round(strength * model.schedule.T))
    with torch.no_grad():
        z0 = model.autoencoder.encode(x)
        eps = torch.randn(z0.shape, generator=gen)
        z = q_sample(z0, t_start, eps, model.schedule)
        z = denoise_latents(model, z, t_start, cond, min(n_steps, t_start))
        out = model.autoencoder.decode(z)
    return out.clamp(0.0, 1.0)
