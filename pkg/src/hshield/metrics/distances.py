"""Pixel-space distances: l-infinity, PSNR, SSIM, and multi-scale SSIM.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with stabilizers
C1 = 0.01^2 and C2 = 0.03^2 on the [0, 1] dynamic range. MS-SSIM combines
the usual five scale exponents; on small images only the scales where the
window still fits are used and their exponents are renormalized.
"""

import math

import torch
import torch.nn.functional as F
from torch import Tensor

_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 3:
        raise ValueError("expected (C, H, W) images")


def linf(a: Tensor, b: Tensor) -> float:
    _check_pair(a, b)
    return float((a - b).abs().max())


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB over the [0, 1] range; +inf when equal."""
    _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return torch.outer(g, g).to(torch.float32)


def _ssim_and_cs(a: Tensor, b: Tensor, window: Tensor):
    c = a.shape[0]
    w = window.expand(c, 1, *window.shape)
    mu_a = F.conv2d(a.unsqueeze(0), w, groups=c)
    mu_b = F.conv2d(b.unsqueeze(0), w, groups=c)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = F.conv2d((a * a).unsqueeze(0), w, groups=c) - mu_aa
    var_b = F.conv2d((b * b).unsqueeze(0), w, groups=c) - mu_bb
    cov = F.conv2d((a * b).unsqueeze(0), w, groups=c) - mu_ab
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    cs_map = (2 * cov + c2) / (var_a + var_b + c2)
    ssim_map = ((2 * mu_ab + c1) / (mu_aa + mu_bb + c1)) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def ssim(a: Tensor, b: Tensor) -> float:
    _check_pair(a, b)
    s, _ = _ssim_and_cs(a, b, _gaussian_window())
    return s


def ms_ssim(a: Tensor, b: Tensor) -> float:
    """Multi-scale SSIM; scales are dropped (weights renormalized) once the
    downsampled image is smaller than the window."""
    _check_pair(a, b)
    window = _gaussian_window()
    levels = []
    x, y = a, b
    for i, _ in enumerate(_MS_WEIGHTS):
        if min(x.shape[1], x.shape[2]) < window.shape[0]:
            break
        s, cs = _ssim_and_cs(x, y, window)
        levels.append((s, cs))
        if i + 1 < len(_MS_WEIGHTS):
            x = F.avg_pool2d(x.unsqueeze(0), 2).squeeze(0)
            y = F.avg_pool2d(y.unsqueeze(0), 2).squeeze(0)
    if not levels:
        raise ValueError("image too small for the 11x11 SSIM window")
    weights = torch.tensor(_MS_WEIGHTS[: len(levels)])
    weights = weights / weights.sum()
    out = 1.0
    for i, (s, cs) in enumerate(levels):
        term = s if i == len(levels) - 1 else cs
        out *= max(term, 0.0) ** float(weights[i])
    return out


def distances(a: Tensor, b: Tensor) -> dict:
    """All pixel distances between two images of equal shape."""
    return {
        "linf": linf(a, b),
        "psnr": psnr(a, b),
        "ssim": ssim(a, b),
        "ms_ssim": ms_ssim(a, b),
    }
