"""The toy conditional latent diffusion model and its core operations.

A `DiffusionModel` owns the named weight tensors (U-Net plus token table),
the fixed autoencoder, and the noise schedule. A `Manifest` partitions the
parameter names into encoder-side, mid-block ("h-space"), decoder-side, and
text-embedding groups; attacks and fine-tuning select names through it.
"""

import copy
from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F
from torch import Tensor

from .autoencoder import PatchAutoencoder
from .schedule import NoiseSchedule, build_schedule
from .text import Vocabulary, PromptEmbedding, default_vocabulary
from .unet import ConditionalUNet

# The deepest U-Net stage stands in for the semantic bottleneck of a large
# model. Its exact boundary here is a deliberate choice: everything under
# this module prefix, i.e. {residual conv, self-attention, cross-attention,
# residual conv} at the lowest resolution.
MID_BLOCK_PREFIX = "unet.mid."
MID_BLOCK_NOTE = (
    "mid-block = all parameters under 'unet.mid.': residual conv, "
    "self-attention, cross-attention, residual conv at the lowest resolution"
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 2
    base_channels: int = 32
    d_text: int = 32
    seq_len: int = 10
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % (2 * 2 * self.patch):
            raise ValueError("image_size must be divisible by patch size and two downsamples")


@dataclass(frozen=True)
class Manifest:
    """Disjoint partition of all parameter names, plus the cross-attention
    K/V sub-manifest inside the mid block."""

    encoder_side: frozenset
    hspace: frozenset
    decoder_side: frozenset
    text_embedding: frozenset
    hspace_kv: frozenset
    arch: dict = field(default_factory=dict)
    note: str = MID_BLOCK_NOTE

    def all_names(self) -> frozenset:
        return self.encoder_side | self.hspace | self.decoder_side | self.text_embedding

    def validate(self, names) -> None:
        names = frozenset(names)
        parts = [self.encoder_side, self.hspace, self.decoder_side, self.text_embedding]
        covered = frozenset().union(*parts)
        if covered != names:
            missing = names - covered
            extra = covered - names
            raise ValueError(f"manifest does not cover parameters (missing={sorted(missing)}, extra={sorted(extra)})")
        if sum(len(p) for p in parts) != len(covered):
            raise ValueError("manifest partitions overlap")
        if not self.hspace_kv or not self.hspace_kv < self.hspace:
            raise ValueError("KV sub-manifest must be a nonempty strict subset of the mid block")


class DiffusionModel(torch.nn.Module):
    """Named-tensor weight store plus the architecture to run them.

    Forward-style operations never mutate parameters; attacks and fine-tuning
    mutate only the names they have selected through the manifest.
    """

    def __init__(self, config: ModelConfig = None, vocab: Vocabulary = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.vocab = vocab or default_vocabulary(self.config.seq_len)
        if self.vocab.seq_len != self.config.seq_len:
            raise ValueError("vocabulary seq_len does not match model config")
        self.autoencoder = PatchAutoencoder(self.config.patch)
        self.schedule = build_schedule(
            self.config.timesteps, self.config.beta_start, self.config.beta_end
        )
        with torch.random.fork_rng():
            torch.manual_seed(self.config.init_seed)
            # unit-scale rows keep attention logits alive from the start;
            # much smaller and cross-attention stays uniform through training
            self.token_table = torch.nn.Parameter(
                torch.randn(self.vocab.size, self.config.d_text)
            )
            self.unet = ConditionalUNet(
                latent_channels=self.autoencoder.latent_channels,
                base_channels=self.config.base_channels,
                context_dim=self.config.d_text,
            )

    def manifest(self) -> Manifest:
        names = [n for n, _ in self.named_parameters()]
        enc, mid, dec, text = set(), set(), set(), set()
        for n in names:
            if n.startswith(MID_BLOCK_PREFIX):
                mid.add(n)
            elif n.startswith(("unet.time_embed.", "unet.input_proj.", "unet.down")):
                enc.add(n)
            elif n.startswith(("unet.up", "unet.out_norm.", "unet.out_proj.")):
                dec.add(n)
            elif n.startswith("token_table"):
                text.add(n)
            else:
                raise ValueError(f"parameter {n} not assigned to any partition")
        kv = frozenset({"unet.mid.cross.to_k.weight", "unet.mid.cross.to_v.weight"})
        m = Manifest(
            encoder_side=frozenset(enc),
            hspace=frozenset(mid),
            decoder_side=frozenset(dec),
            text_embedding=frozenset(text),
            hspace_kv=kv,
            arch=asdict(self.config),
        )
        m.validate(names)
        return m

    def parameter(self, name: str) -> Tensor:
        for n, p in self.named_parameters():
            if n == name:
                return p
        raise KeyError(f"no parameter named {name}")

    def clone(self) -> "DiffusionModel":
        return copy.deepcopy(self)

    def embed_prompt(self, prompt: PromptEmbedding, batch: int = 1) -> Tensor:
        # personalization adapters may install a transient (row, delta) pair;
        # the table is rebuilt per call so adapter training sees fresh graphs
        table = self.token_table
        override = getattr(self, "_token_row_override", None)
        if override is not None:
            row, vec = override
            onehot = torch.zeros(table.shape[0], dtype=table.dtype)
            onehot[row] = 1.0
            table = table.detach() + torch.outer(onehot, vec)
        ctx = prompt.embed(table)
        return ctx.unsqueeze(0).expand(batch, -1, -1)

    def encode_prompt(self, text: str) -> PromptEmbedding:
        from .text import encode_prompt
        return encode_prompt(self.vocab, text)


def q_sample(z0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward-process sample z_t = sqrt(a_bar) z0 + sqrt(1 - a_bar) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    a_bar = sched.alpha_bar(t).to(z0.dtype)
    return torch.sqrt(a_bar) * z0 + torch.sqrt(1.0 - a_bar) * eps


def predict_noise(model: DiffusionModel, z_t: Tensor, t: int, cond: PromptEmbedding,
                  capture: dict = None) -> Tensor:
    """Run the U-Net on (a batch of) latents at one shared timestep."""
    squeeze = z_t.dim() == 3
    if squeeze:
        z_t = z_t.unsqueeze(0)
    if not 1 <= t <= model.schedule.T:
        raise ValueError(f"timestep {t} out of range [1, {model.schedule.T}]")
    b = z_t.shape[0]
    context = model.embed_prompt(cond, batch=b).to(z_t.dtype)
    t_tensor = torch.full((b,), t, dtype=torch.long)
    out = model.unet(z_t, t_tensor, context, capture=capture)
    return out.squeeze(0) if squeeze else out


def ldm_loss(model: DiffusionModel, z0: Tensor, cond: PromptEmbedding, t: int,
             eps: Tensor) -> Tensor:
    """Mean squared error between eps and the prediction at q_sample(z0, t, eps)."""
    z_t = q_sample(z0, t, eps, model.schedule)
    pred = predict_noise(model, z_t, t, cond)
    return F.mse_loss(pred, eps)


def extract_h_activations(model: DiffusionModel, z_t: Tensor, t: int,
                          cond: PromptEmbedding) -> Tensor:
    """Mid-block output for the given latents; (B, C, h, w) or (C, h, w)."""
    capture = {}
    with torch.no_grad():
        predict_noise(model, z_t, t, cond, capture=capture)
    act = capture["h_activation"]
    return act.squeeze(0) if z_t.dim() == 3 else act


def extract_attention_maps(model: DiffusionModel, z_t: Tensor, t: int,
                           cond: PromptEmbedding) -> Tensor:
    """Mid-block cross-attention as per-token spatial maps.

    Returns (seq_len, h, w) for a single latent or (B, seq_len, h, w) for a
    batch; summing over the token axis at any spatial position gives 1.
    """
    capture = {}
    with torch.no_grad():
        predict_noise(model, z_t, t, cond, capture=capture)
    attn = capture["cross_attention"]  # (B, positions, tokens)
    b, positions, tokens = attn.shape
    side = int(positions ** 0.5)
    maps = attn.transpose(1, 2).reshape(b, tokens, side, side)
    return maps.squeeze(0) if z_t.dim() == 3 else maps


def validate_image(x: Tensor, image_size: int = None) -> None:
    """Check the (3, H, W) shape and [0, 1] range contract."""
    if x.dim() != 3 or x.shape[0] != 3 or x.shape[1] != x.shape[2]:
        raise ValueError(f"expected square (3, H, H) image, got {tuple(x.shape)}")
    if image_size is not None and x.shape[1] != image_size:
        raise ValueError(f"expected image size {image_size}, got {x.shape[1]}")
    if float(x.min()) < 0.0 or float(x.max()) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
