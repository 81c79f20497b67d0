"""Small conditional U-Net operating on patch latents.

Layout: input conv -> 2 down blocks (base -> 2*base channels) -> mid block
(residual conv, self-attention, cross-attention, residual conv) -> 2 up
blocks with skip connections -> output conv. The deepest down block and the
first up block also carry cross-attention so that attacks scoped to "all
cross-attention KV" differ from attacks scoped to the mid block alone.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResidualBlock(nn.Module):
    """Two 3x3 convs with group norm and an additive timestep projection."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Single-head spatial self-attention over flattened positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial positions onto prompt tokens.

    Queries come from image features, keys and values from the prompt
    embedding. K/V projections are bias-free so that zeroing the key weight
    makes every attention row exactly uniform.
    """

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def attention_weights(self, x: Tensor, context: Tensor) -> Tensor:
        """softmax(Q K^T / sqrt(d)): shape (B, positions, tokens)."""
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q = self.to_q(tokens)
        k = self.to_k(context)
        return torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        b, c, h, w = x.shape
        attn = self.attention_weights(x, context)
        v = self.to_v(context)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, context_dim: int, cross_attn: bool):
        super().__init__()
        self.res = ResidualBlock(in_ch, out_ch, time_dim)
        self.cross = CrossAttention(out_ch, context_dim) if cross_attn else None
        self.down = Downsample(out_ch)

    def forward(self, x, t_emb, context):
        h = self.res(x, t_emb)
        if self.cross is not None:
            h = self.cross(h, context)
        return self.down(h), h


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, time_dim: int,
                 context_dim: int, cross_attn: bool):
        super().__init__()
        self.up = Upsample(in_ch)
        self.res = ResidualBlock(in_ch + skip_ch, out_ch, time_dim)
        self.cross = CrossAttention(out_ch, context_dim) if cross_attn else None

    def forward(self, x, skip, t_emb, context):
        h = self.up(x)
        h = self.res(torch.cat([h, skip], dim=1), t_emb)
        if self.cross is not None:
            h = self.cross(h, context)
        return h


class MidBlock(nn.Module):
    """The deepest stage: residual conv, self-attention, cross-attention,
    residual conv. Its output is the semantic bottleneck that parameter-scoped
    attacks target; `forward` optionally returns it for activation capture."""

    def __init__(self, channels: int, time_dim: int, context_dim: int):
        super().__init__()
        self.res1 = ResidualBlock(channels, channels, time_dim)
        self.self_attn = SelfAttention(channels)
        self.cross = CrossAttention(channels, context_dim)
        self.res2 = ResidualBlock(channels, channels, time_dim)

    def forward(self, x, t_emb, context):
        h = self.res1(x, t_emb)
        h = self.self_attn(h)
        h = self.cross(h, context)
        h = self.res2(h, t_emb)
        return h


class ConditionalUNet(nn.Module):
    """Noise predictor over latents, conditioned on timestep and prompt."""

    def __init__(self, latent_channels: int, base_channels: int, context_dim: int,
                 time_dim: int = 64):
        super().__init__()
        c1, c2 = base_channels, base_channels * 2
        self.time_dim = time_dim
        self.time_embed = nn.Sequential(
            nn.Linear(time_dim, time_dim * 2), nn.SiLU(), nn.Linear(time_dim * 2, time_dim)
        )
        self.input_proj = nn.Conv2d(latent_channels, c1, 3, padding=1)
        self.down1 = DownBlock(c1, c1, time_dim, context_dim, cross_attn=False)
        self.down2 = DownBlock(c1, c2, time_dim, context_dim, cross_attn=True)
        self.mid = MidBlock(c2, time_dim, context_dim)
        self.up1 = UpBlock(c2, c2, c2, time_dim, context_dim, cross_attn=True)
        self.up2 = UpBlock(c2, c1, c1, time_dim, context_dim, cross_attn=False)
        self.out_norm = _norm(c1)
        self.out_proj = nn.Conv2d(c1, latent_channels, 3, padding=1)

    def forward(self, z: Tensor, t: Tensor, context: Tensor, capture: dict = None) -> Tensor:
        """Predict the noise component of z.

        Args:
            z: latents (B, C_lat, h, w).
            t: integer timesteps (B,), 1-based.
            context: prompt embeddings (B, seq_len, d_text).
            capture: optional dict; when given, "h_activation" is set to the
                mid-block output and "cross_attention" to the mid cross
                attention weights (B, positions, tokens).
        """
        dtype = self.input_proj.weight.dtype
        t_emb = self.time_embed(timestep_embedding(t, self.time_dim).to(dtype))
        h = self.input_proj(z)
        h, skip1 = self.down1(h, t_emb, context)
        h, skip2 = self.down2(h, t_emb, context)

        h = self.mid.res1(h, t_emb)
        h = self.mid.self_attn(h)
        if capture is not None:
            capture["cross_attention"] = self.mid.cross.attention_weights(h, context)
        h = self.mid.cross(h, context)
        h = self.mid.res2(h, t_emb)
        if capture is not None:
            capture["h_activation"] = h

        h = self.up1(h, skip2, t_emb, context)
        h = self.up2(h, skip1, t_emb, context)
        return self.out_proj(F.silu(self.out_norm(h)))
