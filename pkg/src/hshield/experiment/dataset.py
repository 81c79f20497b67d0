"""Dataset ingestion (subject folders of images) and a procedural demo set."""

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

_EXTENSIONS = {".png", ".jpg", ".jpeg"}


class DatasetError(RuntimeError):
    pass


def _load_image(path: Path, size: int) -> Tensor:
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise DatasetError(f"unreadable image file {path}: {exc}") from exc
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_dataset(root, size: int) -> dict:
    """Load subject subfolders into {subject: [image tensors]}.

    Images are center-cropped to square, resized to `size`, scaled to [0, 1],
    and ordered lexicographically by filename so loading is reproducible.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    subjects = sorted(p for p in root.iterdir() if p.is_dir())
    if not subjects:
        raise DatasetError(f"no subject subfolders under {root}")
    out = {}
    for subject in subjects:
        files = sorted(p for p in subject.iterdir()
                       if p.suffix.lower() in _EXTENSIONS)
        if not files:
            raise DatasetError(f"subject folder {subject} contains no images")
        out[subject.name] = [_load_image(p, size) for p in files]
    return out


def _subject_image(subject_idx: int, variant: int, size: int) -> Tensor:
    """One procedural 'identity': a palette, a blob layout, and a stripe
    texture that vary a little per image but a lot per subject."""
    gen = torch.Generator().manual_seed(10_000 + subject_idx)
    palette = torch.rand(3, 3, generator=gen)  # 3 colors per subject
    centers = torch.rand(2, 2, generator=gen) * 0.6 + 0.2
    angle = float(torch.rand((), generator=gen)) * math.pi
    freq = 3.0 + float(torch.rand((), generator=gen)) * 4.0

    # per-image variation is deliberately sizable: identity must live in the
    # palette/texture, not in exact pixel positions
    vgen = torch.Generator().manual_seed(77_000 + subject_idx * 97 + variant)
    jitter = (torch.rand(2, 2, generator=vgen) - 0.5) * 0.3
    phase = float(torch.rand((), generator=vgen)) * 2 * math.pi
    freq_j = 1.0 + (float(torch.rand((), generator=vgen)) - 0.5) * 0.3
    radius = 0.015 + float(torch.rand((), generator=vgen)) * 0.02

    ys, xs = torch.meshgrid(torch.linspace(0, 1, size), torch.linspace(0, 1, size),
                            indexing="ij")
    stripes = 0.5 + 0.5 * torch.sin(
        2 * math.pi * freq * freq_j * (xs * math.cos(angle) + ys * math.sin(angle)) + phase)
    img = palette[0][:, None, None] * stripes + palette[1][:, None, None] * (1 - stripes)
    for i in range(2):
        cx, cy = (centers[i] + jitter[i]).tolist()
        r2 = (xs - cx) ** 2 + (ys - cy) ** 2
        blob = torch.exp(-r2 / radius)
        img = img * (1 - blob) + palette[2][:, None, None] * blob
    return img.clamp(0.0, 1.0)


def generate_demo_dataset(root, subjects: int = 2, images_per_subject: int = 5,
                          size: int = 64) -> dict:
    """Write a small synthetic dataset of distinct procedural subjects.

    Returns the same {subject: [tensors]} mapping that load_dataset yields.
    """
    root = Path(root)
    out = {}
    for s in range(subjects):
        name = f"subject{s:02d}"
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        tensors = []
        for v in range(images_per_subject):
            img = _subject_image(s, v, size)
            arr = (img * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
            Image.fromarray(arr, mode="RGB").save(folder / f"img{v:03d}.png")
            # keep the quantized values so this matches a later load_dataset
            tensors.append(torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1))
        out[name] = tensors
    return out
