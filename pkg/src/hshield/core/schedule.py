"""Forward-process noise schedule (linear beta ramp, cumulative alphas)."""

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule of the forward diffusion process.

    betas[i] is the per-step variance at timestep t = i + 1 (timesteps are
    1-based in all public APIs). alphas_bar[i] = prod_{s<=i} (1 - betas[s]).
    """

    T: int
    betas: Tensor
    alphas_bar: Tensor

    def alpha_bar(self, t: int) -> Tensor:
        """Cumulative alpha at 1-based timestep t."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")
        return self.alphas_bar[t - 1]


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear variance schedule.

    Args:
        T: number of diffusion steps, >= 1.
        beta_start: variance at t=1.
        beta_end: variance at t=T (must be >= beta_start).

    Returns:
        NoiseSchedule with monotone betas and strictly decreasing alphas_bar.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas_bar = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(T=T, betas=betas.to(torch.float32), alphas_bar=alphas_bar.to(torch.float32))
