"""Fixed invertible image<->latent codec: space-to-depth plus an orthonormal mix.

Not a trained VAE. Both directions are exact linear maps, so decode(encode(x))
reproduces x to float precision and gradients pass straight through to pixels.
"""

import math

import torch
from torch import Tensor


def _dct_matrix(n: int) -> Tensor:
    """Orthonormal DCT-II basis (rows are basis vectors)."""
    k = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    j = torch.arange(n, dtype=torch.float64).unsqueeze(0)
    m = torch.cos(math.pi * (2.0 * j + 1.0) * k / (2.0 * n))
    m[0] *= math.sqrt(1.0 / n)
    m[1:] *= math.sqrt(2.0 / n)
    return m


class PatchAutoencoder:
    """Maps (3, H, W) images in [0,1] to (3*p*p, H/p, W/p) latents and back.

    The channel mixing matrix is a fixed orthonormal basis, so the map is
    norm-preserving and exactly invertible.
    """

    def __init__(self, patch: int = 2):
        if patch < 1:
            raise ValueError(f"patch size must be >= 1, got {patch}")
        self.patch = patch
        self.latent_channels = 3 * patch * patch
        self.mix = _dct_matrix(self.latent_channels).to(torch.float32)

    def encode(self, x: Tensor) -> Tensor:
        """Image tensor (3, H, W) or batch (B, 3, H, W) -> latent."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) image, got shape {tuple(x.shape)}")
        b, c, h, w = x.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch {p}")
        z = x.reshape(b, c, h // p, p, w // p, p)
        z = z.permute(0, 1, 3, 5, 2, 4).reshape(b, c * p * p, h // p, w // p)
        mix = self.mix.to(z.dtype)
        z = torch.einsum("oc,bchw->bohw", mix, z)
        return z.squeeze(0) if squeeze else z

    def decode(self, z: Tensor) -> Tensor:
        """Latent (C_lat, h, w) or batch -> image tensor, no clamping applied."""
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(
                f"expected latent with {self.latent_channels} channels, got shape {tuple(z.shape)}"
            )
        b, _, h, w = z.shape
        p = self.patch
        mix = self.mix.to(z.dtype)
        x = torch.einsum("oc,bohw->bchw", mix, z)
        x = x.reshape(b, 3, p, p, h, w).permute(0, 1, 4, 2, 5, 3)
        x = x.reshape(b, 3, h * p, w * p)
        return x.squeeze(0) if squeeze else x

    def latent_shape(self, image_size: int) -> tuple:
        return (self.latent_channels, image_size // self.patch, image_size // self.patch)
