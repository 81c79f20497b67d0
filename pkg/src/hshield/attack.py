"""PGD-based image protection with selectable parameter scopes.

The attack maximizes the denoising loss over an l-infinity ball around the
input image while simultaneously descending the loss over a chosen subset of
model weights, so the perturbation tracks the defender-side training
dynamics. Restricting the subset to the mid-block cross-attention K/V
projections gives the cheap variant; widening it gives the baselines.
"""

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .core.model import DiffusionModel, Manifest, ldm_loss, validate_image
from .core.text import PromptEmbedding


class MaskKind(enum.Enum):
    """Which parameter names an attack is allowed to update."""

    HSPACE_ALL = "hspace_all"
    HSPACE_KV = "hspace_kv"
    ALL_CROSS_ATTN_KV = "cross_attn_kv"
    FULL_MODEL = "full_model"


class AttackError(RuntimeError):
    pass


class AttackDivergedError(AttackError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass(frozen=True)
class ParameterMask:
    kind: MaskKind
    names: frozenset

    def __post_init__(self):
        if not self.names:
            raise AttackError(f"mask {self.kind} resolved to an empty set")


@dataclass(frozen=True)
class AttackConfig:
    eta: float = 4.0 / 255.0
    alpha: float = 5e-3
    steps: int = 250
    weight_lr: float = 1e-5
    mask: MaskKind = MaskKind.HSPACE_KV
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0 or self.alpha <= 0:
            raise ValueError("eta and alpha must be positive")
        if self.steps < 0 or self.weight_lr < 0:
            raise ValueError("steps must be >= 0 and weight_lr >= 0")


@dataclass
class Perturbation:
    """A bounded image perturbation plus its budget certificate."""

    delta: Tensor
    eta: float
    max_abs: float

    @classmethod
    def of(cls, protected: Tensor, original: Tensor, eta: float) -> "Perturbation":
        delta = protected - original
        return cls(delta=delta, eta=eta, max_abs=float(delta.abs().max()))

    def check(self, tol: float = 2.0 ** -20) -> None:
        if self.max_abs > self.eta + tol:
            raise AttackError(
                f"budget violated: max |delta| = {self.max_abs} > eta = {self.eta}")


@dataclass
class AttackTrace:
    """Per-step record of one protection run."""

    header: dict
    losses: list = field(default_factory=list)
    max_delta: list = field(default_factory=list)
    perturbations: list = field(default_factory=list)


def select_parameters(store: DiffusionModel, kind: MaskKind) -> ParameterMask:
    """Resolve a mask kind to concrete parameter names over the manifest."""
    m: Manifest = store.manifest()
    all_names = frozenset(n for n, _ in store.named_parameters())
    if kind == MaskKind.HSPACE_ALL:
        names = m.hspace
    elif kind == MaskKind.HSPACE_KV:
        names = m.hspace_kv
    elif kind == MaskKind.ALL_CROSS_ATTN_KV:
        names = frozenset(
            n for n in all_names
            if n.endswith(".cross.to_k.weight") or n.endswith(".cross.to_v.weight"))
    elif kind == MaskKind.FULL_MODEL:
        names = all_names
    else:
        raise AttackError(f"unknown mask kind: {kind!r}")
    return ParameterMask(kind=kind, names=names)


def count_masked_parameters(mask: ParameterMask, store: DiffusionModel) -> int:
    """Total element count of the masked tensors."""
    params = dict(store.named_parameters())
    return sum(params[n].numel() for n in mask.names)


def pgd_project(x: Tensor, x_orig: Tensor, eta: float) -> Tensor:
    """Project x into the eta-ball around x_orig, then into valid pixel range."""
    if x.shape != x_orig.shape:
        raise ValueError("shape mismatch between image and reference")
    delta = torch.clamp(x - x_orig, -eta, eta)
    return torch.clamp(x_orig + delta, 0.0, 1.0)


def attack_step(x_adv: Tensor, x_orig: Tensor, grad_x: Tensor, cfg: AttackConfig) -> Tensor:
    """One sign-gradient ascent step followed by projection; sign(0) = 0."""
    if grad_x.shape != x_adv.shape:
        raise ValueError("gradient shape does not match image shape")
    return pgd_project(x_adv + cfg.alpha * torch.sign(grad_x), x_orig, cfg.eta)


def run_attack(images: list, store: DiffusionModel, cond: PromptEmbedding,
               cfg: AttackConfig):
    """Craft protected versions of `images` against (and with) `store`.

    Each step draws one timestep and one noise tensor shared by the whole
    image batch, takes a single backward pass to get gradients for both the
    masked weights and the images, descends the weights, and ascends the
    perturbation with projection back into the budget.

    Mutates only the masked weights of `store`. Returns
    (protected images, store, trace).
    """
    for x in images:
        validate_image(x, store.config.image_size)
    mask = select_parameters(store, cfg.mask)
    params = dict(store.named_parameters())
    masked = [params[n] for n in sorted(mask.names)]

    gen = torch.Generator().manual_seed(cfg.seed)
    x_orig = torch.stack(images)
    x_adv = x_orig.clone()
    trace = AttackTrace(header={
        "mask": cfg.mask.value,
        "eta": cfg.eta,
        "alpha": cfg.alpha,
        "steps": cfg.steps,
        "weight_lr": cfg.weight_lr,
        "seed": cfg.seed,
        "n_images": len(images),
        # joint update convention: weights move by descent, image by ascent
        "weight_update": "descent",
        "noise_draws": "one (t, eps) per step, shared across the batch",
    })

    latent_shape = store.autoencoder.latent_shape(store.config.image_size)
    for step in range(cfg.steps):
        t = int(torch.randint(1, store.schedule.T + 1, (1,), generator=gen))
        eps_one = torch.randn(latent_shape, generator=gen)
        eps = eps_one.unsqueeze(0).expand(x_adv.shape[0], *latent_shape)

        x_in = x_adv.clone().requires_grad_(True)
        z0 = store.autoencoder.encode(x_in)
        loss = ldm_loss(store, z0, cond, t, eps)
        if not torch.isfinite(loss):
            raise AttackDivergedError(f"non-finite loss {float(loss.detach())} at step {step + 1}")
        grads = torch.autograd.grad(loss, [x_in] + masked)
        grad_x, grad_w = grads[0], grads[1:]
        for g, name in zip(grads, ["image"] + sorted(mask.names)):
            if not torch.isfinite(g).all():
                raise AttackDivergedError(f"non-finite gradient for {name} at step {step + 1}")

        with torch.no_grad():
            if cfg.weight_lr > 0:
                for p, g in zip(masked, grad_w):
                    p.add_(g, alpha=-cfg.weight_lr)
            x_adv = attack_step(x_adv, x_orig, grad_x, cfg)

        max_abs = float((x_adv - x_orig).abs().max())
        if max_abs > cfg.eta + 2.0 ** -20:
            raise AttackError(f"internal budget violation after projection: {max_abs}")
        trace.losses.append(float(loss.detach()))
        trace.max_delta.append(max_abs)

    protected = [x_adv[i].detach().clone() for i in range(x_adv.shape[0])]
    for x_prot, x in zip(protected, images):
        cert = Perturbation.of(x_prot, x, cfg.eta)
        cert.check()
        trace.perturbations.append(cert)
    return protected, store, trace


def export_protected_png(x_prot: Tensor, x_orig: Tensor, cfg: AttackConfig, path,
                         extra: dict = None) -> dict:
    """Write an 8-bit PNG whose quantized pixels still certify the budget.

    Quantized values are clipped into the integer window
    [ceil(255*(x - eta)), floor(255*(x + eta))], which is nonempty whenever
    2*eta >= 1/255, so the saved file obeys the same l-infinity bound as the
    continuous tensor. A JSON sidecar records the provenance.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x255 = (x_prot.clamp(0, 1) * 255.0).round()
    lo = torch.ceil((x_orig - cfg.eta) * 255.0 - 1e-6).clamp(0, 255)
    hi = torch.floor((x_orig + cfg.eta) * 255.0 + 1e-6).clamp(0, 255)
    q = torch.minimum(torch.maximum(x255, lo), hi)
    arr = q.to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")

    achieved = float((q / 255.0 - x_orig).abs().max())
    sidecar = {
        "original_sha256": hashlib.sha256(
            x_orig.detach().numpy().tobytes()).hexdigest(),
        "eta": cfg.eta,
        "alpha": cfg.alpha,
        "steps": cfg.steps,
        "mask": cfg.mask.value,
        "seed": cfg.seed,
        "achieved_max_delta": achieved,
    }
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
    return sidecar


def load_image_png(path) -> Tensor:
    """Read an 8-bit RGB PNG back into a [0, 1] float tensor."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)
