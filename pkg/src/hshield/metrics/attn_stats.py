"""Spatial entropy of attention maps."""

import math

import torch
from torch import Tensor


def attention_entropy(token_map: Tensor) -> float:
    """Shannon entropy (nats) of a token's spatial attention distribution.

    The map is normalized to sum 1 before the entropy; a one-hot map scores
    0 and a uniform map over M positions scores ln M.
    """
    flat = token_map.reshape(-1).to(torch.float64)
    if float(flat.min()) < 0:
        raise ValueError("attention map must be nonnegative")
    total = float(flat.sum())
    if total <= 0:
        raise ValueError("attention map must have positive mass")
    p = flat / total
    nz = p[p > 0]
    return float(-(nz * torch.log(nz)).sum())


def placeholder_entropy(maps: Tensor, placeholder_positions) -> float:
    """Entropy of the placeholder token's map, averaged over its positions.

    `maps` is (seq_len, h, w) as produced by the attention extraction op.
    """
    if not placeholder_positions:
        raise ValueError("prompt has no placeholder token")
    vals = [attention_entropy(maps[i]) for i in placeholder_positions]
    return sum(vals) / len(vals)


def uniform_entropy(positions: int) -> float:
    return math.log(positions)
