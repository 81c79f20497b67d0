"""Deterministic image pre-processing used to test protection survival.

Four transforms an adversary might use to strip a perturbation: additive
Gaussian noise, Gaussian blur, a JPEG encode/decode roundtrip, and a resize
there-and-back. All operate on [0, 1] tensors and clamp their outputs.
"""

import enum
import io
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

# JPEG settings are pinned so sidecar records imply bit-exact reproducibility:
# Pillow codec, 4:4:4 subsampling (no chroma loss beyond quantization).
JPEG_CODEC = f"Pillow {Image.__version__}, subsampling=0"


class PurifyKind(enum.Enum):
    GAUSS_NOISE = "gauss_noise"
    GAUSS_BLUR = "gauss_blur"
    JPEG = "jpeg"
    RESIZE = "resize"


@dataclass(frozen=True)
class PurifySpec:
    kind: PurifyKind
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind == PurifyKind.GAUSS_NOISE and self.param <= 0:
            raise ValueError("noise sigma must be positive (8-bit units)")
        if self.kind == PurifyKind.GAUSS_BLUR:
            k = int(self.param)
            if k != self.param or k < 3 or k % 2 == 0:
                raise ValueError("blur kernel size must be an odd integer >= 3")
        if self.kind == PurifyKind.JPEG and not 1 <= self.param <= 100:
            raise ValueError("JPEG quality must lie in [1, 100]")
        if self.kind == PurifyKind.RESIZE and self.param not in (2.0, 0.5):
            raise ValueError("resize factor must be 2.0 or 0.5")

    def label(self) -> str:
        if self.kind == PurifyKind.GAUSS_NOISE:
            return f"noise_s{self.param:g}"
        if self.kind == PurifyKind.GAUSS_BLUR:
            return f"blur_k{int(self.param)}"
        if self.kind == PurifyKind.JPEG:
            return f"jpeg_q{int(self.param)}"
        return f"resize_{self.param:g}x"


def gaussian_kernel1d(size: int) -> Tensor:
    """Normalized 1-D Gaussian; sigma follows the usual size -> sigma rule."""
    sigma = 0.3 * ((size - 1) * 0.5 - 1.0) + 0.8
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(torch.float32)


def _blur(x: Tensor, size: int) -> Tensor:
    k = gaussian_kernel1d(size)
    pad = size // 2
    h = F.pad(x.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    kh = k.view(1, 1, 1, size).expand(3, 1, 1, size)
    kv = k.view(1, 1, size, 1).expand(3, 1, size, 1)
    h = F.conv2d(h, kh, groups=3)
    h = F.conv2d(h, kv, groups=3)
    return h.squeeze(0)


def _jpeg(x: Tensor, quality: int) -> Tensor:
    arr = (x.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=quality, subsampling=0)
    buf.seek(0)
    back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(back).permute(2, 0, 1)


def _resize_roundtrip(x: Tensor, factor: float) -> Tensor:
    # plain bilinear both ways; boundary rows deviate slightly, the interior
    # roundtrips exactly for bilinear-smooth content
    h = x.shape[1]
    mid = F.interpolate(x.unsqueeze(0), scale_factor=factor, mode="bilinear",
                        align_corners=False)
    back = F.interpolate(mid, size=(h, h), mode="bilinear", align_corners=False)
    return back.squeeze(0)


def purify(x: Tensor, spec: PurifySpec) -> Tensor:
    """Apply one purification transform; output stays in [0, 1].

    GAUSS_NOISE: adds N(0, (sigma/255)^2) per pixel, seeded.
    GAUSS_BLUR: separable normalized Gaussian, reflect padding.
    JPEG: 8-bit encode/decode roundtrip at the given quality.
    RESIZE: bilinear scale by the factor and back to the original size.
    """
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
    if spec.kind == PurifyKind.GAUSS_NOISE:
        gen = torch.Generator().manual_seed(spec.seed)
        noise = torch.randn(x.shape, generator=gen) * (spec.param / 255.0)
        out = x + noise
    elif spec.kind == PurifyKind.GAUSS_BLUR:
        out = _blur(x, int(spec.param))
    elif spec.kind == PurifyKind.JPEG:
        out = _jpeg(x, int(spec.param))
    elif spec.kind == PurifyKind.RESIZE:
        out = _resize_roundtrip(x, spec.param)
    else:
        raise ValueError(f"unknown purification kind: {spec.kind!r}")
    return out.clamp(0.0, 1.0)
