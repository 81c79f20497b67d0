"""Experiment configuration: a strict nested key-value document.

Unknown keys are errors; every default is spelled out in the dataclasses so
a resolved spec is self-describing. The spec hash pins provenance for every
metric row derived from it.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from ..attack import MaskKind
from ..core.model import ModelConfig
from ..personalize import FinetuneMode
from ..purify import PurifyKind, PurifySpec

# experiment-level method labels: the four attack scopes plus a no-attack
# control arm
METHODS = ("none",) + tuple(k.value for k in MaskKind)


@dataclass(frozen=True)
class AttackAxis:
    methods: tuple = ("hspace_kv",)
    budgets: tuple = (4.0 / 255.0,)
    alpha: float = 5e-3
    steps: int = 250
    weight_lr: float = 1e-5

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown attack method {m!r}, valid: {METHODS}")
        if not self.budgets:
            raise ValueError("budgets must be nonempty")
        if not self.methods:
            raise ValueError("methods must be nonempty")


@dataclass(frozen=True)
class PersonalizationAxis:
    mode: str = "lowrank"
    steps: int = 300
    lr: float = 2e-3
    rank: int = 4

    def __post_init__(self):
        if self.mode not in (m.value for m in FinetuneMode):
            raise ValueError(f"unknown personalization mode {self.mode!r}")

    def finetune_mode(self) -> FinetuneMode:
        return FinetuneMode(self.mode)


@dataclass(frozen=True)
class ModelSpec:
    """One named architecture/seed configuration (transfer grid node)."""

    name: str = "base"
    image_size: int = 64
    base_channels: int = 32
    init_seed: int = 0
    pretrain_steps: int = 800
    pretrain_lr: float = 2e-3

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size,
                           base_channels=self.base_channels,
                           init_seed=self.init_seed)


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str = "data"
    output_root: str = "runs"
    train_prompt: str = "a photo of sks person"
    # "{subject}" is replaced by a distinct word per subject so the base
    # model's conditioning is load-bearing before personalization starts
    pretrain_prompt: str = "a photo of {subject} person"
    prompts: tuple = ("a photo of sks person",)
    seeds: tuple = (0,)
    attack: AttackAxis = field(default_factory=AttackAxis)
    personalization: PersonalizationAxis = field(default_factory=PersonalizationAxis)
    purifications: tuple = ("none",)
    transfer: tuple = (("base", "base"),)
    models: tuple = (ModelSpec(),)
    generate_per_cell: int = 4
    sample_steps: int = 20
    proxy_train_steps: int = 300
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.prompts:
            raise ValueError("prompts must be nonempty")
        names = {m.name for m in self.models}
        if len(names) != len(self.models):
            raise ValueError("model names must be unique")
        for attacker, target in self.transfer:
            if attacker not in names or target not in names:
                raise ValueError(f"transfer pair ({attacker}, {target}) references unknown model")
        for p in self.purifications:
            if p != "none":
                parse_purification(p)

    def model_by_name(self, name: str) -> ModelSpec:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)


def parse_purification(label: str) -> PurifySpec:
    """Parse labels like noise_s8, blur_k5, jpeg_q70, resize_0.5x."""
    try:
        kind, _, value = label.partition("_")
        if kind == "noise":
            return PurifySpec(PurifyKind.GAUSS_NOISE, float(value.lstrip("s")))
        if kind == "blur":
            return PurifySpec(PurifyKind.GAUSS_BLUR, int(value.lstrip("k")))
        if kind == "jpeg":
            return PurifySpec(PurifyKind.JPEG, int(value.lstrip("q")))
        if kind == "resize":
            return PurifySpec(PurifyKind.RESIZE, float(value.rstrip("x")))
    except ValueError as exc:
        raise ValueError(f"bad purification label {label!r}: {exc}") from exc
    raise ValueError(f"unknown purification label {label!r}")


def _build(cls, doc: dict, context: str):
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(doc) - fields
    if unknown:
        raise ValueError(f"unknown keys in {context}: {sorted(unknown)}")
    return doc


def spec_from_dict(doc: dict) -> ExperimentSpec:
    doc = dict(doc or {})
    _build(ExperimentSpec, doc, "experiment spec")
    if "attack" in doc:
        sub = _build(AttackAxis, dict(doc["attack"]), "attack")
        for key in ("methods", "budgets"):
            if key in sub:
                sub[key] = tuple(sub[key])
        doc["attack"] = AttackAxis(**sub)
    if "personalization" in doc:
        doc["personalization"] = PersonalizationAxis(
            **_build(PersonalizationAxis, dict(doc["personalization"]), "personalization"))
    if "models" in doc:
        doc["models"] = tuple(
            ModelSpec(**_build(ModelSpec, dict(m), "models[]")) for m in doc["models"])
    if "transfer" in doc:
        doc["transfer"] = tuple((a, t) for a, t in doc["transfer"])
    for key in ("prompts", "seeds", "purifications"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return ExperimentSpec(**doc)


def load_spec(path) -> ExperimentSpec:
    doc = yaml.safe_load(Path(path).read_text())
    return spec_from_dict(doc)


def spec_hash(spec: ExperimentSpec) -> str:
    canon = json.dumps(asdict(spec), sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
