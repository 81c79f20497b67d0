"""Base-model training loop (defender-side plumbing, standard Adam)."""

import torch

from .model import DiffusionModel, ldm_loss


def train_model(model: DiffusionModel, groups: list, steps: int, lr: float = 2e-3,
                batch_size: int = 4, seed: int = 0) -> list:
    """Train all parameters on groups of images sharing a prompt.

    Args:
        groups: list of (images, prompt) pairs; each images entry is a list
            of (3, H, W) tensors conditioned on that prompt.
        steps: optimizer steps; each draws one group, a batch of its images,
            one shared timestep, and fresh noise.

    Returns the per-step loss history. Deterministic given the seed.
    """
    gen = torch.Generator().manual_seed(seed)
    stacked = [(torch.stack([model.autoencoder.encode(x) for x in imgs]), prompt)
               for imgs, prompt in groups]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for _ in range(steps):
        g = int(torch.randint(0, len(stacked), (1,), generator=gen))
        latents, prompt = stacked[g]
        n = min(batch_size, latents.shape[0])
        idx = torch.randperm(latents.shape[0], generator=gen)[:n]
        t = int(torch.randint(1, model.schedule.T + 1, (1,), generator=gen))
        z0 = latents[idx]
        eps = torch.randn(z0.shape, generator=gen)
        opt.zero_grad()
        loss = ldm_loss(model, z0, prompt, t, eps)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history
