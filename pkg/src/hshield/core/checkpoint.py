"""Checkpoint persistence: named-tensor archive plus a text manifest.

The manifest (JSON) lists the parameter partitions, the K/V sub-manifest,
and the architecture hyperparameters; loading validates it against the model
rebuilt from those hyperparameters.
"""

import hashlib
import json
from pathlib import Path

import torch

from .model import DiffusionModel, ModelConfig


def state_hash(model: torch.nn.Module) -> str:
    """Deterministic sha256 over sorted parameter names, shapes, and bytes.

    Unlike hashing a serialized file, this is stable across serializer
    versions, so it is what run records pin their lineage to.
    """
    h = hashlib.sha256()
    for name in sorted(dict(model.state_dict())):
        t = model.state_dict()[name]
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def save_checkpoint(model: DiffusionModel, path) -> str:
    """Write weights to `path` and the manifest next to it; returns state hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict()}, path)
    m = model.manifest()
    doc = {
        "arch": m.arch,
        "partitions": {
            "encoder_side": sorted(m.encoder_side),
            "hspace": sorted(m.hspace),
            "decoder_side": sorted(m.decoder_side),
            "text_embedding": sorted(m.text_embedding),
        },
        "hspace_kv": sorted(m.hspace_kv),
        "mid_block_note": m.note,
        "state_hash": state_hash(model),
    }
    manifest_path(path).write_text(json.dumps(doc, indent=2))
    return doc["state_hash"]


def load_checkpoint(path) -> DiffusionModel:
    """Rebuild a model from a checkpoint, validating the manifest."""
    path = Path(path)
    doc = json.loads(manifest_path(path).read_text())
    config = ModelConfig(**doc["arch"])
    model = DiffusionModel(config)
    payload = torch.load(path, weights_only=True)
    model.load_state_dict(payload["state_dict"])

    m = model.manifest()
    for key, part in [
        ("encoder_side", m.encoder_side),
        ("hspace", m.hspace),
        ("decoder_side", m.decoder_side),
        ("text_embedding", m.text_embedding),
    ]:
        if set(doc["partitions"][key]) != set(part):
            raise ValueError(f"checkpoint manifest partition '{key}' does not match architecture")
    if set(doc["hspace_kv"]) != set(m.hspace_kv):
        raise ValueError("checkpoint manifest KV sub-manifest does not match architecture")
    if doc["state_hash"] != state_hash(model):
        raise ValueError("checkpoint weights do not match the recorded state hash")
    return model
