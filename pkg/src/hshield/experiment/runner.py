"""Pipeline orchestration: protect -> purify -> personalize -> generate -> evaluate.

A `Runner` owns per-sweep caches so stages shared between cells (the clean
baseline arm, attack outputs reused across prompts) are computed once. Every
stage seed is derived deterministically from the cell coordinates, which is
what makes whole-sweep reruns hash-identical.
"""

import hashlib
import json
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ..attack import AttackConfig, MaskKind, export_protected_png, run_attack
from ..core.checkpoint import save_checkpoint, state_hash
from ..core.model import DiffusionModel, extract_attention_maps, extract_h_activations, q_sample
from ..core.training import train_model
from ..metrics.attn_stats import placeholder_entropy
from ..metrics.distances import distances
from ..metrics.pca import pca_alignment
from ..metrics.proxy import proxy_sim, save_proxy, train_proxy_encoder
from ..metrics.report import MetricsReport, MetricsRow
from ..personalize import FinetuneConfig, FinetuneMode, finetune_attention, finetune_lowrank, generate_personalized
from ..purify import purify
from .dataset import load_dataset
from .spec import ExperimentSpec, parse_purification, spec_hash

PCA_KS = (5, 10, 20, 50)

# distinct pretraining words, one per subject, all inside the toy vocabulary
SUBJECT_WORDS = ("red", "green", "blue", "yellow", "purple", "orange",
                 "white", "black", "bright", "dark", "round", "square")


def stage_seed(*parts) -> int:
    """Deterministic 31-bit seed from stage coordinates."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


@dataclass(frozen=True)
class CellCoords:
    method: str
    budget: float
    prompt: str
    purification: str
    attacker: str
    target: str
    seed: int

    def cell_id(self) -> str:
        b = round(self.budget * 255)
        p = hashlib.sha256(self.prompt.encode()).hexdigest()[:6]
        return (f"{self.method}_b{b}_p{p}_{self.purification}"
                f"_{self.attacker}-to-{self.target}_s{self.seed}")


@dataclass
class RunRecord:
    spec_hash: str
    environment: dict = field(default_factory=dict)
    checkpoint_hashes: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)
    report: MetricsReport = field(default_factory=MetricsReport)
    wall_clock: float = 0.0

    @property
    def failed_cells(self) -> list:
        return [cid for cid, info in self.cells.items() if info["status"] == "failed"]

    def save(self, path) -> None:
        doc = {
            "spec_hash": self.spec_hash,
            "environment": self.environment,
            "checkpoint_hashes": self.checkpoint_hashes,
            "cells": self.cells,
            "report_hash": self.report.content_hash(),
            "wall_clock_s": self.wall_clock,
        }
        Path(path).write_text(json.dumps(doc, indent=2))


def environment_fingerprint() -> dict:
    import numpy
    return {
        "python": sys.version.split()[0],
        "torch": torch.__version__,
        "numpy": numpy.__version__,
        "platform": platform.platform(),
    }


class Runner:
    """Executes cells of one experiment spec with shared stage caches."""

    def __init__(self, spec: ExperimentSpec, out_root=None):
        self.spec = spec
        self.hash = spec_hash(spec)
        self.root = Path(out_root if out_root is not None else spec.output_root) / self.hash
        self.root.mkdir(parents=True, exist_ok=True)
        self._cache = {}
        self.record = RunRecord(spec_hash=self.hash,
                                environment=environment_fingerprint())

        self.dataset = load_dataset(spec.dataset, spec.models[0].image_size)
        self.subjects = sorted(self.dataset)

    # ---- shared stages -------------------------------------------------

    def _cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    def pretrain_prompt_for(self, subject_index: int) -> str:
        template = self.spec.pretrain_prompt
        if "{subject}" in template:
            word = SUBJECT_WORDS[subject_index % len(SUBJECT_WORDS)]
            return template.format(subject=word)
        return template

    def base_model(self, name: str) -> DiffusionModel:
        def build():
            ms = self.spec.model_by_name(name)
            model = DiffusionModel(ms.model_config())
            groups = [
                (self.dataset[subject], model.encode_prompt(self.pretrain_prompt_for(i)))
                for i, subject in enumerate(self.subjects)
            ]
            train_model(model, groups, steps=ms.pretrain_steps, lr=ms.pretrain_lr,
                        seed=stage_seed("pretrain", name))
            h = save_checkpoint(model, self.root / "checkpoints" / f"{name}.pt")
            self.record.checkpoint_hashes[name] = h
            return model
        return self._cached(("base", name), build)

    def proxy_encoder(self):
        def build():
            images = [x for imgs in self.dataset.values() for x in imgs]
            enc = train_proxy_encoder(images, steps=self.spec.proxy_train_steps,
                                      seed=stage_seed("proxy"))
            h = save_proxy(enc, self.root / "checkpoints" / "proxy.pt")
            self.record.checkpoint_hashes["proxy"] = h
            return enc
        return self._cached(("proxy",), build)

    def _arm(self, subject: str, coords: CellCoords) -> tuple:
        """Stage identity of one protect(+purify) arm; the control arm is
        shared no matter which attacker/budget the cell nominally carries."""
        if coords.method == "none":
            return (subject, "none", 0.0, coords.seed, "-", coords.purification)
        return (subject, coords.method, coords.budget, coords.seed,
                coords.attacker, coords.purification)

    def protect(self, subject: str, coords: CellCoords):
        """Protected images for one subject; the none method is an exact copy."""
        method, budget, seed, attacker = coords.method, coords.budget, coords.seed, coords.attacker
        if method == "none":
            key = ("protect", subject, "none")
        else:
            key = ("protect", subject, method, budget, seed, attacker)

        def build():
            clean = self.dataset[subject]
            if method == "none":
                return {"images": [x.clone() for x in clean], "trace": None,
                        "attacker_hash": None}
            model = self.base_model(attacker).clone()
            cfg = AttackConfig(
                eta=budget,
                alpha=self.spec.attack.alpha,
                steps=self.spec.attack.steps,
                weight_lr=self.spec.attack.weight_lr,
                mask=MaskKind(method),
                seed=stage_seed("attack", subject, method, budget, seed, attacker),
            )
            prompt = model.encode_prompt(self.spec.train_prompt)
            protected, _, trace = run_attack(clean, model, prompt, cfg)
            stage_dir = (self.root / "protected" /
                         f"{subject}_{method}_b{round(budget * 255)}_s{seed}_{attacker}")
            for i, (xp, xo) in enumerate(zip(protected, clean)):
                export_protected_png(xp, xo, cfg, stage_dir / f"img{i:03d}.png")
            return {"images": protected, "trace": trace,
                    "attacker_hash": self.record.checkpoint_hashes.get(attacker)}
        return self._cached(key, build)

    def purified(self, subject: str, coords: CellCoords):
        prot = self.protect(subject, coords)
        if coords.purification == "none":
            return prot["images"]
        key = ("purify",) + self._arm(subject, coords)

        def build():
            spec = parse_purification(coords.purification)
            return [purify(x, spec) for x in prot["images"]]
        return self._cached(key, build)

    def personalized(self, subject: str, coords: CellCoords):
        """Fine-tuned model (and adapters) for one pipeline arm."""
        arm = ("personalize",) + self._arm(subject, coords) + (coords.target,)

        def build():
            images = self.purified(subject, coords)
            base = self.base_model(coords.target)
            model = base.clone()
            p = self.spec.personalization
            cfg = FinetuneConfig(
                steps=p.steps, lr=p.lr, mode=p.finetune_mode(), rank=p.rank,
                seed=stage_seed("finetune", *arm[1:]),
            )
            prompt = model.encode_prompt(self.spec.train_prompt)
            if cfg.mode == FinetuneMode.ATTN_ONLY:
                finetune_attention(model, images, prompt, cfg)
                adapters = None
            else:
                model, adapters = finetune_lowrank(model, images, prompt, cfg)
            return {"model": model, "adapters": adapters,
                    "target_hash": self.record.checkpoint_hashes.get(coords.target)}
        return self._cached(arm, build)

    def generated(self, subject: str, coords: CellCoords):
        key = (("generate",) + self._arm(subject, coords)
               + (coords.target, coords.prompt))

        def build():
            pers = self.personalized(subject, coords)
            model = pers["model"].clone()  # generation wraps modules in place
            prompt = model.encode_prompt(coords.prompt)
            return generate_personalized(
                model, prompt, n=self.spec.generate_per_cell,
                seed=stage_seed("generate", *key[1:]),
                adapters=pers["adapters"], n_steps=self.spec.sample_steps)
        return self._cached(key, build)

    def clean_coords(self, coords: CellCoords) -> CellCoords:
        """The matching no-attack control arm for a cell."""
        return CellCoords(method="none", budget=0.0, prompt=coords.prompt,
                          purification="none", attacker=coords.attacker,
                          target=coords.target, seed=coords.seed)

    # ---- probes ---------------------------------------------------------

    def _probe_latents(self, model: DiffusionModel, images, n_timesteps: int = None):
        """(z_t, t) probes: every image at a grid of timesteps, shared noise."""
        sched = model.schedule
        if n_timesteps is None:
            # enough probes for a rank-(max k) PCA even with few images
            n_timesteps = max(13, -(-(max(PCA_KS) + 2) // len(images)))
        ts = torch.linspace(1, sched.T, n_timesteps).round().long().tolist()
        probes = []
        for i, x in enumerate(images):
            z0 = model.autoencoder.encode(x)
            for j, t in enumerate(ts):
                gen = torch.Generator().manual_seed(stage_seed("probe", i, j))
                eps = torch.randn(z0.shape, generator=gen)
                probes.append((q_sample(z0, int(t), eps, sched), int(t)))
        return probes

    def activation_alignment(self, subject: str, coords: CellCoords) -> dict:
        """PCA alignment of mid-block activations, clean vs protected inputs,
        probed through the target base model."""
        model = self.base_model(coords.target)
        clean = self.dataset[subject]
        protected = self.purified(subject, coords)
        prompt = model.encode_prompt(self.spec.train_prompt)
        acts = []
        for images in (clean, protected):
            probes = self._probe_latents(model, images)
            acts.append([extract_h_activations(model, z, t, prompt).numpy()
                         for z, t in probes])
        return pca_alignment(acts[0], acts[1], ks=PCA_KS)

    def entropy_probe(self, subject: str, coords: CellCoords) -> float:
        """Placeholder-token attention entropy of the personalized model on
        clean probe images, averaged over a few early timesteps."""
        pers = self.personalized(subject, coords)
        model = pers["model"]
        prompt = model.encode_prompt(self.spec.train_prompt)
        sched = model.schedule
        ts = sorted({max(1, round(f * sched.T)) for f in (0.01, 0.03, 0.08)})
        values = []
        ctx = None
        if pers["adapters"] is not None:
            from ..personalize import apply_adapters
            ctx = apply_adapters(model, pers["adapters"])
            ctx.__enter__()
        try:
            for i, x in enumerate(self.dataset[subject]):
                z0 = model.autoencoder.encode(x)
                for t in ts:
                    gen = torch.Generator().manual_seed(stage_seed("entropy", i, t))
                    z = q_sample(z0, t, torch.randn(z0.shape, generator=gen), sched)
                    maps = extract_attention_maps(model, z, t, prompt)
                    values.append(placeholder_entropy(maps, prompt.placeholder_positions))
        finally:
            if ctx is not None:
                ctx.__exit__(None, None, None)
        return sum(values) / len(values)

    # ---- cells ----------------------------------------------------------

    def run_cell(self, coords: CellCoords) -> list:
        """Execute one cell for every subject; returns the metric rows."""
        enc = self.proxy_encoder()
        rows = []
        for subject in self.subjects:
            clean = self.dataset[subject]
            protected = self.protect(subject, coords)["images"]
            generated = self.generated(subject, coords)
            clean_gen = self.generated(subject, self.clean_coords(coords))

            pair = [distances(p, c) for p, c in zip(protected, clean)]
            metrics = {
                "linf": max(d["linf"] for d in pair),
                "psnr": sum(d["psnr"] for d in pair) / len(pair),
                "ssim": sum(d["ssim"] for d in pair) / len(pair),
                "ms_ssim": sum(d["ms_ssim"] for d in pair) / len(pair),
                "proxy_sim": proxy_sim(enc, generated, clean),
                "proxy_sim_clean_arm": proxy_sim(enc, clean_gen, clean),
                "ms_ssim_gen": sum(
                    distances(g, cg)["ms_ssim"] for g, cg in zip(generated, clean_gen)
                ) / len(generated),
                "attention_entropy": self.entropy_probe(subject, coords),
            }
            align = self.activation_alignment(subject, coords)
            for k, v in align.items():
                metrics[f"pca_alignment_k{k}"] = v
            trace = self.protect(subject, coords)["trace"]
            if trace is not None and trace.losses:
                metrics["attack_loss_final"] = trace.losses[-1]
            rows.append(MetricsRow(
                method=coords.method, budget=coords.budget, prompt=coords.prompt,
                seed=coords.seed, purification=coords.purification,
                transfer=f"{coords.attacker}->{coords.target}", subject=subject,
                config_hash=self.hash, metrics=metrics,
            ))
        return rows

    def run_cell_recorded(self, coords: CellCoords) -> bool:
        """run_cell with failure isolation; returns True on success."""
        cid = coords.cell_id()
        try:
            rows = self.run_cell(coords)
        except Exception:
            self.record.cells[cid] = {"status": "failed",
                                      "error": traceback.format_exc()}
            return False
        for row in rows:
            self.record.report.add(row)
        self.record.cells[cid] = {
            "status": "ok",
            "artifacts": str(self.root / "cells" / cid),
        }
        return True

    def all_coords(self) -> list:
        """The Cartesian cell grid of the spec."""
        out = []
        for attacker, target in self.spec.transfer:
            for method in self.spec.attack.methods:
                budgets = (0.0,) if method == "none" else self.spec.attack.budgets
                for budget in budgets:
                    for prompt in self.spec.prompts:
                        for purification in self.spec.purifications:
                            for seed in self.spec.seeds:
                                out.append(CellCoords(
                                    method=method, budget=budget, prompt=prompt,
                                    purification=purification, attacker=attacker,
                                    target=target, seed=seed))
        return out


def run_cell(spec: ExperimentSpec, coords: CellCoords, out_root=None) -> list:
    return Runner(spec, out_root=out_root).run_cell(coords)


def sweep(spec: ExperimentSpec, out_root=None) -> RunRecord:
    """Run every cell in the spec grid; failures are recorded, not raised."""
    t0 = time.time()
    runner = Runner(spec, out_root=out_root)
    for coords in runner.all_coords():
        runner.run_cell_recorded(coords)
    runner.record.wall_clock = time.time() - t0
    runner.record.report.save(runner.root / "report" / "metrics.csv",
                              runner.root / "report" / "metrics.json")
    runner.record.save(runner.root / "runrecord.json")
    return runner.record
