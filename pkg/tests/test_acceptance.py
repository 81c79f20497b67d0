"""Acceptance criteria A1-A9, one pass/fail line per criterion.

A3-A7 share one end-to-end pipeline (trained base model, attacks at three
budgets, personalization in both modes, purified arms) built once per
session; its sizes come from acceptance_config.yaml. Run with -s to watch
progress.
"""

import math
import time
from pathlib import Path

import pytest
import torch
import yaml
from scipy.stats import spearmanr

from hshield.attack import (AttackConfig, MaskKind, export_protected_png,
                            load_image_png, run_attack, select_parameters,
                            count_masked_parameters)
from hshield.core import DiffusionModel, ModelConfig, ldm_loss
from hshield.core.model import extract_attention_maps, q_sample
from hshield.experiment.dataset import generate_demo_dataset
from hshield.experiment.runner import CellCoords, Runner
from hshield.experiment.spec import spec_from_dict

from conftest import TINY, rand_image

CFG = yaml.safe_load((Path(__file__).parent / "acceptance_config.yaml").read_text())
SEEDS = CFG["seeds"]
ETA4, ETA8, ETA16 = 4 / 255, 8 / 255, 16 / 255

pytestmark = pytest.mark.slow


def announce(criterion: str, passed: bool, detail: str) -> None:
    print(f"\n[{criterion}] {'PASS' if passed else 'FAIL'} - {detail}", flush=True)
    assert passed, f"{criterion}: {detail}"


# --------------------------------------------------------------------------
# A1 / A2: budget certificate and mask isolation (fast, tiny model)
# --------------------------------------------------------------------------

def test_a1_budget_certificate(tmp_path):
    tol = 2 ** -20
    model = DiffusionModel(TINY)
    prompt = model.encode_prompt("a photo of sks person")
    checked = 0
    worst = 0.0
    for b_idx, eta in enumerate((ETA4, ETA8, ETA16)):
        for batch in range(14):
            images = [rand_image(TINY.image_size, 1000 * b_idx + 10 * batch + i)
                      for i in range(5)]
            cfg = AttackConfig(eta=eta, alpha=5e-3, steps=8, weight_lr=1e-5,
                               mask=MaskKind.HSPACE_KV, seed=batch)
            protected, _, _ = run_attack(images, model.clone(), prompt, cfg)
            for i, (xp, xo) in enumerate(zip(protected, images)):
                delta = float((xp - xo).abs().max())
                assert delta <= eta + tol
                assert 0.0 <= float(xp.min()) and float(xp.max()) <= 1.0
                path = tmp_path / f"p{b_idx}_{batch}_{i}.png"
                export_protected_png(xp, xo, cfg, path)
                loaded = load_image_png(path)
                q_delta = float((loaded - xo).abs().max())
                assert q_delta <= eta + tol
                worst = max(worst, delta - eta, q_delta - eta)
                checked += 1
    announce("A1", checked >= 200,
             f"{checked} protected images across eta in {{4,8,16}}/255 all within "
             f"budget and [0,1], incl. after 8-bit export (worst overshoot {worst:.2e})")


def test_a2_mask_isolation():
    model = DiffusionModel(TINY)
    prompt = model.encode_prompt("a photo of sks person")
    images = [rand_image(TINY.image_size, 5 + i) for i in range(3)]

    kv_store = model.clone()
    before = {n: p.detach().clone() for n, p in kv_store.named_parameters()}
    run_attack(images, kv_store, prompt,
               AttackConfig(eta=ETA4, alpha=5e-3, steps=5, weight_lr=1e-3,
                            mask=MaskKind.HSPACE_KV, seed=0))
    kv_changed = {n for n, p in kv_store.named_parameters()
                  if not torch.equal(p, before[n])}
    kv_ok = kv_changed == {"unet.mid.cross.to_k.weight", "unet.mid.cross.to_v.weight"}

    hs_store = model.clone()
    run_attack(images, hs_store, prompt,
               AttackConfig(eta=ETA4, alpha=5e-3, steps=5, weight_lr=1e-3,
                            mask=MaskKind.HSPACE_ALL, seed=0))
    hs_changed = {n for n, p in hs_store.named_parameters()
                  if not torch.equal(p, before[n])}
    hs_ok = bool(hs_changed) and hs_changed <= model.manifest().hspace

    counts = [count_masked_parameters(select_parameters(model, k), model)
              for k in (MaskKind.HSPACE_KV, MaskKind.HSPACE_ALL, MaskKind.FULL_MODEL)]
    counts_ok = counts[0] < counts[1] < counts[2]
    announce("A2", kv_ok and hs_ok and counts_ok,
             f"KV diff support {sorted(kv_changed)}; mid-scope diff inside mid block; "
             f"counts {counts[0]} < {counts[1]} < {counts[2]}")


# --------------------------------------------------------------------------
# A3-A7: shared end-to-end pipeline
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    t0 = time.time()
    data_dir = tmp_path_factory.mktemp("accept_data")
    out_dir = tmp_path_factory.mktemp("accept_out")
    d = CFG["dataset"]
    generate_demo_dataset(data_dir, subjects=d["subjects"],
                          images_per_subject=d["images_per_subject"], size=d["size"])

    def make_spec(mode):
        return spec_from_dict({
            "dataset": str(data_dir),
            "seeds": SEEDS,
            "attack": {"methods": ["none", "hspace_all", "hspace_kv"],
                       "budgets": [ETA4, ETA8, ETA16],
                       "alpha": CFG["attack"]["alpha"],
                       "steps": CFG["attack"]["steps"],
                       "weight_lr": CFG["attack"]["weight_lr"]},
            "personalization": {"mode": mode, "steps": CFG["personalization"]["steps"],
                                "lr": CFG["personalization"]["lr"],
                                "rank": CFG["personalization"]["rank"]},
            "purifications": ["none", "jpeg_q70", "blur_k5"],
            "models": [{"name": "base", "image_size": d["size"],
                        "base_channels": CFG["model"]["base_channels"],
                        "pretrain_steps": CFG["model"]["pretrain_steps"],
                        "pretrain_lr": CFG["model"]["pretrain_lr"]}],
            "generate_per_cell": CFG["generate_per_cell"],
            "sample_steps": CFG["sample_steps"],
            "proxy_train_steps": CFG["proxy_train_steps"],
        })

    runners = {"lowrank": Runner(make_spec("lowrank"), out_dir / "lowrank"),
               "attn_only": Runner(make_spec("attn_only"), out_dir / "attn")}

    def coords(method, budget, seed, purification="none"):
        return CellCoords(method=method, budget=budget,
                          prompt="a photo of sks person", purification=purification,
                          attacker="base", target="base", seed=seed)

    # the cells each criterion needs; everything else stays uncomputed
    grid = {
        "lowrank": (
            [coords("none", 0.0, s) for s in SEEDS]
            + [coords("hspace_kv", b, s) for b in (ETA4, ETA8, ETA16) for s in SEEDS]
            + [coords("hspace_all", ETA4, s) for s in SEEDS]
            + [coords("hspace_kv", ETA4, s, p) for p in ("jpeg_q70", "blur_k5")
               for s in SEEDS]
        ),
        "attn_only": (
            [coords("none", 0.0, s) for s in SEEDS]
            + [coords("hspace_kv", ETA4, s) for s in SEEDS]
        ),
    }

    rows = {}
    for mode, runner in runners.items():
        if mode == "attn_only":
            # protection is personalization-agnostic: share the attack outputs
            for key, value in runners["lowrank"]._cache.items():
                if key[0] == "protect":
                    runner._cache[key] = value
        for c in grid[mode]:
            for row in runner.run_cell(c):
                rows[(mode, c.method, round(c.budget * 255), c.purification,
                      c.seed, row.subject)] = row.metrics
            print(f"[pipeline] {mode} {c.method}@{round(c.budget*255)} {c.purification} "
                  f"seed={c.seed} done at {time.time()-t0:.0f}s", flush=True)
    print(f"[pipeline] total {time.time()-t0:.0f}s", flush=True)
    return {"rows": rows, "runners": runners, "subjects": runners["lowrank"].subjects}


def _seed_mean(rows, mode, method, b255, purification, seed, metric, subjects):
    vals = [rows[(mode, method, b255, purification, seed, s)][metric] for s in subjects]
    return sum(vals) / len(vals)


def test_a3_poisoning_effect(pipeline):
    rows, subjects = pipeline["rows"], pipeline["subjects"]
    detail = []
    ok = True
    for mode in ("attn_only", "lowrank"):
        gaps = []
        for seed in SEEDS:
            clean = _seed_mean(rows, mode, "none", 0, "none", seed, "proxy_sim", subjects)
            prot = _seed_mean(rows, mode, "hspace_kv", 4, "none", seed, "proxy_sim", subjects)
            gaps.append(clean - prot)
        wins = sum(1 for g in gaps if g > 0)
        mean_gap = sum(gaps) / len(gaps)
        detail.append(f"{mode}: wins {wins}/5, mean gap {mean_gap:+.4f}")
        ok = ok and wins >= 4 and mean_gap >= 0.02
    announce("A3", ok, "; ".join(detail))


def test_a4_budget_monotonicity(pipeline):
    rows, subjects = pipeline["rows"], pipeline["subjects"]
    means = {}
    for metric in ("proxy_sim", "ms_ssim_gen"):
        means[metric] = [
            sum(_seed_mean(rows, "lowrank", "hspace_kv", b, "none", s, metric, subjects)
                for s in SEEDS) / len(SEEDS)
            for b in (4, 8, 16)
        ]
    rho_p = spearmanr([4, 8, 16], means["proxy_sim"]).statistic
    rho_m = spearmanr([4, 8, 16], means["ms_ssim_gen"]).statistic
    ok = rho_p == -1.0 and rho_m == -1.0
    announce("A4", ok,
             f"proxy_sim {['%.4f' % v for v in means['proxy_sim']]} (rho={rho_p:+.0f}), "
             f"ms_ssim_gen {['%.4f' % v for v in means['ms_ssim_gen']]} (rho={rho_m:+.0f})")


def test_a5_attention_disruption(pipeline):
    rows, subjects = pipeline["rows"], pipeline["subjects"]
    wins = 0
    triples = []
    for seed in SEEDS:
        clean = _seed_mean(rows, "lowrank", "none", 0, "none", seed,
                           "attention_entropy", subjects)
        haad = _seed_mean(rows, "lowrank", "hspace_all", 4, "none", seed,
                          "attention_entropy", subjects)
        kv = _seed_mean(rows, "lowrank", "hspace_kv", 4, "none", seed,
                        "attention_entropy", subjects)
        triples.append((clean, haad, kv))
        if clean < haad <= kv:
            wins += 1
    announce("A5", wins >= 4,
             f"clean < mid-scope <= kv-scope in {wins}/5 seeds; "
             + "; ".join(f"({c:.3f}, {h:.3f}, {k:.3f})" for c, h, k in triples))


def test_a6_pca_trend(pipeline):
    rows, subjects = pipeline["rows"], pipeline["subjects"]
    ks = (5, 10, 20, 50)
    table = {}
    for b in (4, 8, 16):
        for k in ks:
            table[(b, k)] = sum(
                _seed_mean(rows, "lowrank", "hspace_kv", b, "none", s,
                           f"pca_alignment_k{k}", subjects)
                for s in SEEDS) / len(SEEDS)
    eta_ok = all(table[(4, k)] > table[(8, k)] > table[(16, k)] for k in ks)
    k_ok = all(table[(b, 5)] > table[(b, 10)] > table[(b, 20)] > table[(b, 50)]
               for b in (4, 8, 16))
    detail = "; ".join(
        f"eta={b}: " + ", ".join(f"k{k}={table[(b, k)]:.4f}" for k in ks)
        for b in (4, 8, 16))
    announce("A6", eta_ok and k_ok, detail)


def test_a7_purification_robustness(pipeline):
    rows, subjects = pipeline["rows"], pipeline["subjects"]
    detail = []
    ok = True
    for purification in ("jpeg_q70", "blur_k5"):
        wins = 0
        gaps = []
        for seed in SEEDS:
            clean = _seed_mean(rows, "lowrank", "none", 0, "none", seed,
                               "proxy_sim", subjects)
            prot = _seed_mean(rows, "lowrank", "hspace_kv", 4, purification, seed,
                              "proxy_sim", subjects)
            gaps.append(clean - prot)
            if clean - prot > 0:
                wins += 1
        detail.append(f"{purification}: wins {wins}/5 (mean gap {sum(gaps)/5:+.4f})")
        ok = ok and wins >= 3
    announce("A7", ok, "; ".join(detail))


# --------------------------------------------------------------------------
# A8: numerical oracles
# --------------------------------------------------------------------------

def test_a8_numerical_oracles():
    model = DiffusionModel(TINY).double()
    prompt = model.encode_prompt("a photo of sks person")
    size = TINY.image_size

    # sign agreement of autodiff vs central differences on 200 coordinates
    x = rand_image(size, 3).double().clamp(0.05, 0.95)
    gen = torch.Generator().manual_seed(4)
    eps = torch.randn(model.autoencoder.latent_shape(size), generator=gen).double()
    t = 13
    kv_names = sorted(model.manifest().hspace_kv)
    kv_params = [model.parameter(n) for n in kv_names]

    x_req = x.clone().requires_grad_(True)
    loss = ldm_loss(model, model.autoencoder.encode(x_req), prompt, t, eps)
    grads = torch.autograd.grad(loss, [x_req] + kv_params)
    grad_map = {"x": grads[0], kv_names[0]: grads[1], kv_names[1]: grads[2]}

    def loss_at():
        with torch.no_grad():
            return float(ldm_loss(model, model.autoencoder.encode(x), prompt, t, eps))

    h = 1e-3
    agree = total = 0
    gen2 = torch.Generator().manual_seed(5)
    targets = [("x", x)] + list(zip(kv_names, kv_params))
    for _ in range(200):
        which = int(torch.randint(0, len(targets), (1,), generator=gen2))
        name, tensor = targets[which]
        flat = tensor.detach().reshape(-1)
        idx = int(torch.randint(0, flat.numel(), (1,), generator=gen2))
        with torch.no_grad():
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = loss_at()
            flat[idx] = orig - h
            down = loss_at()
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        ad = float(grad_map[name].reshape(-1)[idx])
        if fd == 0.0 and ad == 0.0 or fd * ad > 0:
            agree += 1
        total += 1
    sign_ok = agree / total >= 0.99

    # attention rows are probability vectors
    z = model.autoencoder.encode(rand_image(size, 7).double())
    maps = extract_attention_maps(model, z, 5, prompt)
    rows_ok = float((maps.sum(dim=0) - 1.0).abs().max()) < 1e-6

    # codec roundtrip
    xr = rand_image(size, 9)
    ae = DiffusionModel(TINY).autoencoder
    round_ok = float((ae.decode(ae.encode(xr)) - xr).abs().max()) < 1e-5

    # forward-process variance against its closed form
    sched = DiffusionModel(TINY).schedule
    gen3 = torch.Generator().manual_seed(11)
    zt = q_sample(torch.zeros(10_000), sched.T, torch.randn(10_000, generator=gen3), sched)
    target_var = 1.0 - float(sched.alpha_bar(sched.T))
    var_ok = abs(float(zt.var()) - target_var) / target_var < 0.05

    announce("A8", sign_ok and rows_ok and round_ok and var_ok,
             f"FD sign agreement {agree}/{total}; attention rows sum to 1; "
             f"roundtrip < 1e-5; MC variance within 5%")


# --------------------------------------------------------------------------
# A9: sweep determinism
# --------------------------------------------------------------------------

def test_a9_sweep_determinism(tmp_path):
    from hshield.experiment.runner import sweep
    data_dir = tmp_path / "data"
    generate_demo_dataset(data_dir, subjects=1, images_per_subject=3, size=16)
    doc = {
        "dataset": str(data_dir),
        "seeds": [0, 1],
        "attack": {"methods": ["none", "hspace_kv"], "budgets": [ETA4], "steps": 3},
        "personalization": {"mode": "lowrank", "steps": 3, "lr": 1e-3},
        "models": [{"name": "base", "image_size": 16, "base_channels": 8,
                    "pretrain_steps": 4}],
        "generate_per_cell": 1,
        "sample_steps": 2,
        "proxy_train_steps": 6,
    }
    rec1 = sweep(spec_from_dict(doc), out_root=tmp_path / "r1")
    rec2 = sweep(spec_from_dict(doc), out_root=tmp_path / "r2")
    same = (rec1.report.content_hash() == rec2.report.content_hash()
            and not rec1.failed_cells and not rec2.failed_cells)
    announce("A9", same, f"report hash {rec1.report.content_hash()[:16]} reproduced")
