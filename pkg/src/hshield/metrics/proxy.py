"""Frozen convolutional feature extractor standing in for CLIP-style embeddings.

Three strided conv blocks pool to a 128-dim embedding. The encoder is trained
once per experiment on the clean dataset with a reconstruction objective,
centered by the training-set mean embedding (cosines then reflect content
differences instead of a shared bias direction), checkpointed, and hash-pinned.
"""

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..core.checkpoint import state_hash


class ProxyEncoder(nn.Module):
    def __init__(self, embed_dim: int = 128, width: int = 32, init_seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.blocks = nn.Sequential(
                nn.Conv2d(3, width, 3, stride=2, padding=1), nn.GroupNorm(8, width), nn.SiLU(),
                nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.GroupNorm(8, width * 2), nn.SiLU(),
                nn.Conv2d(width * 2, embed_dim, 3, stride=2, padding=1), nn.GroupNorm(8, embed_dim), nn.SiLU(),
            )
        self.register_buffer("mean_embedding", torch.zeros(embed_dim))

    def features(self, x: Tensor) -> Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return self.blocks(x).mean(dim=(2, 3))

    def embed(self, x: Tensor) -> Tensor:
        """Centered, unit-norm embedding; (B, D) for a batch, (D,) for one image."""
        squeeze = x.dim() == 3
        f = self.features(x) - self.mean_embedding
        f = F.normalize(f, dim=-1)
        return f.squeeze(0) if squeeze else f

    def checkpoint_hash(self) -> str:
        return state_hash(self)


class _Decoder(nn.Module):
    """Reconstruction head used only while fitting the encoder."""

    def __init__(self, embed_dim: int, width: int, out_size: int):
        super().__init__()
        self.start = out_size // 8
        self.proj = nn.Linear(embed_dim, embed_dim * self.start * self.start)
        self.net = nn.Sequential(
            nn.Conv2d(embed_dim, width * 2, 3, padding=1), nn.SiLU(), nn.Upsample(scale_factor=2),
            nn.Conv2d(width * 2, width, 3, padding=1), nn.SiLU(), nn.Upsample(scale_factor=2),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Upsample(scale_factor=2),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def forward(self, f: Tensor) -> Tensor:
        h = self.proj(f).reshape(f.shape[0], -1, self.start, self.start)
        return self.net(h)


def train_proxy_encoder(images: list, steps: int = 300, lr: float = 2e-3,
                        batch_size: int = 8, seed: int = 0, width: int = 32) -> ProxyEncoder:
    """Fit the encoder on clean images via self-supervised reconstruction,
    then freeze it and store the training-set mean embedding."""
    if not images:
        raise ValueError("need at least one training image")
    size = images[0].shape[1]
    enc = ProxyEncoder(width=width, init_seed=seed)
    dec = _Decoder(enc.embed_dim, width, size)
    with torch.random.fork_rng():
        torch.manual_seed(seed + 1)
        for m in dec.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight)
                nn.init.zeros_(m.bias)
    data = torch.stack(images)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(list(enc.parameters()) + list(dec.parameters()), lr=lr)
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (min(batch_size, data.shape[0]),), generator=gen)
        batch = data[idx]
        opt.zero_grad()
        recon = dec(enc.features(batch))
        loss = F.mse_loss(recon, batch)
        loss.backward()
        opt.step()
    with torch.no_grad():
        enc.mean_embedding.copy_(enc.features(data).mean(dim=0))
    for p in enc.parameters():
        p.requires_grad_(False)
    enc.eval()
    return enc


def proxy_sim(enc: ProxyEncoder, set_a: list, set_b: list) -> float:
    """Mean pairwise cosine similarity between the two embedded sets."""
    if not set_a or not set_b:
        raise ValueError("proxy_sim requires nonempty image sets")
    with torch.no_grad():
        ea = enc.embed(torch.stack(list(set_a)))
        eb = enc.embed(torch.stack(list(set_b)))
    return float((ea @ eb.T).mean())


def save_proxy(enc: ProxyEncoder, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": enc.state_dict(), "embed_dim": enc.embed_dim,
                "width": enc.blocks[0].out_channels}, path)
    return enc.checkpoint_hash()


def load_proxy(path, expected_hash: str = None) -> ProxyEncoder:
    payload = torch.load(path, weights_only=True)
    enc = ProxyEncoder(embed_dim=payload["embed_dim"], width=payload["width"])
    enc.load_state_dict(payload["state_dict"])
    for p in enc.parameters():
        p.requires_grad_(False)
    enc.eval()
    if expected_hash is not None and enc.checkpoint_hash() != expected_hash:
        raise ValueError("proxy encoder checkpoint hash mismatch")
    return enc
