"""Few-shot personalization harnesses over clean or protected images.

Two modes simulate the attacker's customization step: ATTN_ONLY fine-tunes
every cross-attention module in place, LOWRANK trains factor-pair adapters
over all attention projections and leaves the base weights untouched. Both
also train the placeholder-token embedding so the subject binds to it.
"""

import contextlib
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from .core.checkpoint import state_hash
from .core.model import DiffusionModel, ldm_loss, validate_image
from .core.sampling import sample
from .core.text import PromptEmbedding


class FinetuneMode(enum.Enum):
    ATTN_ONLY = "attn_only"
    LOWRANK = "lowrank"


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    lr: float = 2e-3
    mode: FinetuneMode = FinetuneMode.ATTN_ONLY
    rank: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


@dataclass
class AdapterWeights:
    """Low-rank factor pairs per target weight, plus the trained placeholder
    embedding delta. The effective update for a (d, k) target is A @ B."""

    rank: int
    factors: dict = field(default_factory=dict)  # name -> (A: (d, r), B: (r, k))
    placeholder_delta: Tensor = None
    base_hash: str = ""

    def factor_parameter_count(self) -> int:
        return sum(a.numel() + b.numel() for a, b in self.factors.values())


class FinetuneDivergedError(RuntimeError):
    pass


def _cross_attention_parameter_names(model: DiffusionModel) -> list:
    return sorted(n for n, _ in model.named_parameters() if ".cross." in n)


def _attention_projection_names(model: DiffusionModel) -> list:
    """All attention projection weights (self and cross, every block)."""
    suffixes = (".to_q.weight", ".to_k.weight", ".to_v.weight", ".to_out.weight")
    return sorted(n for n, _ in model.named_parameters() if n.endswith(suffixes))


def _mask_token_grad(model: DiffusionModel, keep_row: int) -> None:
    grad = model.token_table.grad
    if grad is not None:
        keep = grad[keep_row].clone()
        grad.zero_()
        grad[keep_row] = keep


def _finetune_loop(model: DiffusionModel, trainables: list, images: list,
                   prompt: PromptEmbedding, cfg: FinetuneConfig,
                   mask_token_rows: bool) -> list:
    latents = torch.stack([model.autoencoder.encode(x) for x in images])
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(trainables, lr=cfg.lr)
    placeholder = model.vocab.placeholder_id
    history = []
    for step in range(cfg.steps):
        t = int(torch.randint(1, model.schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(latents.shape, generator=gen)
        opt.zero_grad()
        loss = ldm_loss(model, latents, prompt, t, eps)
        if not torch.isfinite(loss):
            raise FinetuneDivergedError(f"non-finite loss {float(loss.detach())} at step {step + 1}")
        loss.backward()
        if mask_token_rows:
            _mask_token_grad(model, placeholder)
        opt.step()
        history.append(float(loss.detach()))
    return history


def finetune_attention(store: DiffusionModel, images: list, prompt: PromptEmbedding,
                       cfg: FinetuneConfig) -> DiffusionModel:
    """Fine-tune cross-attention (all blocks) plus the placeholder embedding.

    Mutates `store` in place and returns it; every other tensor stays
    bit-identical. Pass a clone to keep the original.
    """
    if cfg.mode != FinetuneMode.ATTN_ONLY:
        raise ValueError("finetune_attention requires mode=ATTN_ONLY")
    for x in images:
        validate_image(x, store.config.image_size)
    names = set(_cross_attention_parameter_names(store))
    params = dict(store.named_parameters())
    for n, p in params.items():
        p.requires_grad_(n in names or n == "token_table")
    try:
        trainables = [params[n] for n in sorted(names)] + [store.token_table]
        _finetune_loop(store, trainables, images, prompt, cfg, mask_token_rows=True)
    finally:
        for p in params.values():
            p.requires_grad_(True)
        store.zero_grad(set_to_none=True)
    return store


class _AdaptedLinear(torch.nn.Module):
    """Linear replaced by F.linear(x, W + A @ B, bias) with W frozen."""

    def __init__(self, base: torch.nn.Linear, a: Tensor, b: Tensor):
        super().__init__()
        self.base = base
        self.a = a
        self.b = b

    def forward(self, x):
        return F.linear(x, self.base.weight.detach() + self.a @ self.b,
                        None if self.base.bias is None else self.base.bias.detach())


def _module_by_path(model, path: str):
    obj = model
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _set_module(model, path: str, module) -> None:
    parts = path.split(".")
    parent = _module_by_path(model, ".".join(parts[:-1]))
    setattr(parent, parts[-1], module)


@contextlib.contextmanager
def apply_adapters(model: DiffusionModel, adapters: AdapterWeights):
    """Temporarily install adapters; the base modules are restored on exit,
    so the store is bit-identical afterwards."""
    originals = {}
    for name, (a, b) in adapters.factors.items():
        path = name.rsplit(".weight", 1)[0]
        base = _module_by_path(model, path)
        originals[path] = base
        _set_module(model, path, _AdaptedLinear(base, a, b))
    if adapters.placeholder_delta is not None:
        model._token_row_override = (model.vocab.placeholder_id, adapters.placeholder_delta)
    try:
        yield model
    finally:
        for path, base in originals.items():
            _set_module(model, path, base)
        model._token_row_override = None


def finetune_lowrank(store: DiffusionModel, images: list, prompt: PromptEmbedding,
                     cfg: FinetuneConfig):
    """Train rank-r adapters over all attention projections.

    The base store is untouched (verified bit-identical in tests); inference
    applies W + A @ B through `apply_adapters`. Returns (store, adapters).
    """
    if cfg.mode != FinetuneMode.LOWRANK:
        raise ValueError("finetune_lowrank requires mode=LOWRANK")
    for x in images:
        validate_image(x, store.config.image_size)
    gen = torch.Generator().manual_seed(cfg.seed ^ 0x5EED)
    params = dict(store.named_parameters())
    adapters = AdapterWeights(rank=cfg.rank, base_hash=state_hash(store))
    for name in _attention_projection_names(store):
        w = params[name]
        d, k = w.shape
        a = (torch.randn((d, cfg.rank), generator=gen) * 0.02).requires_grad_(True)
        b = torch.zeros((cfg.rank, k), requires_grad=True)
        adapters.factors[name] = (a, b)
    adapters.placeholder_delta = torch.zeros(store.config.d_text, requires_grad=True)

    for p in store.parameters():
        p.requires_grad_(False)
    trainables = [t for pair in adapters.factors.values() for t in pair]
    trainables.append(adapters.placeholder_delta)
    try:
        with apply_adapters(store, adapters):
            _finetune_loop(store, trainables, images, prompt, cfg, mask_token_rows=False)
    finally:
        for p in store.parameters():
            p.requires_grad_(True)
    for pair in adapters.factors.values():
        pair[0].requires_grad_(False)
        pair[1].requires_grad_(False)
    adapters.placeholder_delta.requires_grad_(False)
    return store, adapters


def generate_personalized(store: DiffusionModel, prompt: PromptEmbedding, n: int,
                          seed: int, adapters: AdapterWeights = None,
                          n_steps: int = 30) -> list:
    """Sample n images from the (optionally adapted) personalized model."""
    images = []
    if adapters is None:
        for i in range(n):
            images.append(sample(store, prompt, n_steps=n_steps, seed=seed + i))
    else:
        with apply_adapters(store, adapters):
            for i in range(n):
                images.append(sample(store, prompt, n_steps=n_steps, seed=seed + i))
    return images


def save_adapters(adapters: AdapterWeights, path) -> None:
    """Adapter checkpoint: named factor pairs plus a manifest referencing the
    base checkpoint hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "factors": {n: (a, b) for n, (a, b) in adapters.factors.items()},
        "placeholder_delta": adapters.placeholder_delta,
    }
    torch.save(payload, path)
    manifest = {
        "rank": adapters.rank,
        "base_hash": adapters.base_hash,
        "targets": sorted(adapters.factors),
        "factor_parameters": adapters.factor_parameter_count(),
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2))


def load_adapters(path, expected_base_hash: str = None) -> AdapterWeights:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".manifest.json").read_text())
    if expected_base_hash is not None and manifest["base_hash"] != expected_base_hash:
        raise ValueError("adapter checkpoint references a different base model")
    payload = torch.load(path, weights_only=True)
    return AdapterWeights(
        rank=manifest["rank"],
        factors=dict(payload["factors"]),
        placeholder_delta=payload["placeholder_delta"],
        base_hash=manifest["base_hash"],
    )
