"""Command-line interface.

Subcommands mirror the pipeline stages: protect, finetune, generate, purify,
evaluate, sweep, report, plus demo-data for a synthetic starter dataset.
The output root can also be set with the HSHIELD_OUT environment variable;
exit code is nonzero iff any requested cell failed.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from .attack import AttackConfig, MaskKind, export_protected_png, load_image_png, run_attack
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.model import DiffusionModel, ModelConfig
from .core.training import train_model
from .experiment.dataset import generate_demo_dataset, load_dataset
from .experiment.report import write_report
from .experiment.runner import sweep
from .experiment.spec import load_spec
from .metrics.distances import distances
from .metrics.proxy import load_proxy, proxy_sim, train_proxy_encoder
from .metrics.report import MetricsReport, MetricsRow
from .personalize import (FinetuneConfig, FinetuneMode, finetune_attention,
                          finetune_lowrank, generate_personalized, save_adapters)
from .purify import purify
from .experiment.spec import parse_purification


def _out_root(args) -> Path:
    root = args.out or os.environ.get("HSHIELD_OUT") or "runs"
    return Path(root)


def _save_images(images, out_dir: Path, prefix: str = "img") -> None:
    from PIL import Image
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(images):
        arr = (x.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
        Image.fromarray(arr, mode="RGB").save(out_dir / f"{prefix}{i:03d}.png")


def _load_or_train_model(args) -> DiffusionModel:
    if args.checkpoint and Path(args.checkpoint).exists():
        return load_checkpoint(args.checkpoint)
    model = DiffusionModel(ModelConfig(image_size=args.size))
    if args.pretrain_steps > 0:
        data = load_dataset(args.data, args.size)
        prompt = model.encode_prompt(args.pretrain_prompt)
        groups = [(imgs, prompt) for imgs in data.values()]
        train_model(model, groups, steps=args.pretrain_steps, seed=0)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    return model


def cmd_demo_data(args) -> int:
    generate_demo_dataset(args.out_dir, subjects=args.subjects,
                          images_per_subject=args.images, size=args.size)
    print(f"wrote {args.subjects} subjects x {args.images} images to {args.out_dir}")
    return 0


def cmd_protect(args) -> int:
    model = _load_or_train_model(args)
    data = load_dataset(args.data, model.config.image_size)
    out = _out_root(args) / "protected"
    for subject, images in data.items():
        store = model.clone()
        cfg = AttackConfig(eta=args.eta, alpha=args.alpha, steps=args.steps,
                           weight_lr=args.weight_lr, mask=MaskKind(args.mask),
                           seed=args.seed)
        prompt = store.encode_prompt(args.prompt)
        protected, _, trace = run_attack(images, store, prompt, cfg)
        for i, (xp, xo) in enumerate(zip(protected, images)):
            export_protected_png(xp, xo, cfg, out / subject / f"img{i:03d}.png")
        print(f"{subject}: {len(protected)} images, final loss "
              f"{trace.losses[-1] if trace.losses else float('nan'):.4f}, "
              f"max|delta| {max(trace.max_delta) if trace.max_delta else 0:.6f}")
    print(f"protected images under {out}")
    return 0


def cmd_finetune(args) -> int:
    model = _load_or_train_model(args)
    data = load_dataset(args.data, model.config.image_size)
    images = data[args.subject] if args.subject else next(iter(data.values()))
    cfg = FinetuneConfig(steps=args.steps, lr=args.lr,
                         mode=FinetuneMode(args.mode), rank=args.rank, seed=args.seed)
    prompt = model.encode_prompt(args.prompt)
    out = _out_root(args) / "personalized"
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == FinetuneMode.ATTN_ONLY:
        finetune_attention(model, images, prompt, cfg)
        save_checkpoint(model, out / "model.pt")
        print(f"fine-tuned checkpoint at {out / 'model.pt'}")
    else:
        _, adapters = finetune_lowrank(model, images, prompt, cfg)
        save_adapters(adapters, out / "adapters.pt")
        save_checkpoint(model, out / "base.pt")
        print(f"adapters at {out / 'adapters.pt'} (base {out / 'base.pt'})")
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    adapters = None
    if args.adapters:
        from .personalize import load_adapters
        adapters = load_adapters(args.adapters)
    prompt = model.encode_prompt(args.prompt)
    images = generate_personalized(model, prompt, n=args.n, seed=args.seed,
                                   adapters=adapters, n_steps=args.sample_steps)
    out = _out_root(args) / "generated"
    _save_images(images, out, prefix="gen")
    print(f"{args.n} images under {out}")
    return 0


def cmd_purify(args) -> int:
    spec = parse_purification(args.spec)
    out = _out_root(args) / "purified"
    manifest = {"spec": args.spec, "inputs": str(args.input_dir), "files": []}
    files = sorted(Path(args.input_dir).glob("**/*.png"))
    if not files:
        print(f"no PNG files under {args.input_dir}", file=sys.stderr)
        return 1
    for path in files:
        x = load_image_png(path)
        rel = path.relative_to(args.input_dir)
        target = out / rel
        _save_images([purify(x, spec)], target.parent, prefix=target.stem)
        manifest["files"].append(str(rel))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"purified {len(manifest['files'])} images under {out}")
    return 0


def cmd_evaluate(args) -> int:
    a_dir, b_dir = Path(args.set_a), Path(args.set_b)
    imgs_a = [load_image_png(p) for p in sorted(a_dir.glob("*.png"))]
    imgs_b = [load_image_png(p) for p in sorted(b_dir.glob("*.png"))]
    if not imgs_a or not imgs_b:
        print("both directories must contain PNG images", file=sys.stderr)
        return 1
    report = MetricsReport()
    metrics = {}
    if len(imgs_a) == len(imgs_b):
        pair = [distances(x, y) for x, y in zip(imgs_a, imgs_b)]
        for k in ("linf", "psnr", "ssim", "ms_ssim"):
            metrics[k] = sum(d[k] for d in pair) / len(pair)
    if args.proxy:
        enc = load_proxy(args.proxy)
    else:
        enc = train_proxy_encoder(imgs_b, steps=args.proxy_steps, seed=0)
    metrics["proxy_sim"] = proxy_sim(enc, imgs_a, imgs_b)
    report.add(MetricsRow(method="evaluate", budget=0.0, prompt="", seed=0,
                          metrics=metrics))
    out = _out_root(args) / "evaluation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(report.to_csv())
    return 0


def cmd_sweep(args) -> int:
    spec = load_spec(args.spec)
    record = sweep(spec, out_root=args.out or os.environ.get("HSHIELD_OUT"))
    n_ok = sum(1 for c in record.cells.values() if c["status"] == "ok")
    print(f"{n_ok}/{len(record.cells)} cells ok; report hash {record.report.content_hash()}")
    for cid in record.failed_cells:
        print(f"FAILED {cid}", file=sys.stderr)
    return 1 if record.failed_cells else 0


def cmd_report(args) -> int:
    import csv as _csv
    report = MetricsReport()
    with open(args.metrics_csv) as fh:
        for row in _csv.DictReader(fh):
            fixed = {k: row.pop(k) for k in
                     ("method", "budget", "prompt", "seed", "purification",
                      "transfer", "subject", "config_hash")}
            metrics = {k: float(v) for k, v in row.items() if v not in ("", None)}
            report.add(MetricsRow(method=fixed["method"], budget=float(fixed["budget"]),
                                  prompt=fixed["prompt"], seed=int(fixed["seed"]),
                                  purification=fixed["purification"],
                                  transfer=fixed["transfer"], subject=fixed["subject"],
                                  config_hash=fixed["config_hash"], metrics=metrics))
    paths = write_report(report, _out_root(args) / "report")
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hshield",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help="output root (or HSHIELD_OUT)")

    p = sub.add_parser("demo-data", help="write a synthetic subject dataset")
    p.add_argument("out_dir")
    p.add_argument("--subjects", type=int, default=2)
    p.add_argument("--images", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_demo_data)

    def model_args(p):
        p.add_argument("--checkpoint", default=None, help="model checkpoint to load or create")
        p.add_argument("--size", type=int, default=64)
        p.add_argument("--pretrain-steps", type=int, default=0)
        p.add_argument("--pretrain-prompt", default="a photo of a person")

    p = sub.add_parser("protect", help="craft protected copies of a dataset")
    p.add_argument("data")
    model_args(p)
    p.add_argument("--mask", choices=[k.value for k in MaskKind], default="hspace_kv")
    p.add_argument("--eta", type=float, default=4 / 255)
    p.add_argument("--alpha", type=float, default=5e-3)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--weight-lr", type=float, default=1e-5)
    p.add_argument("--prompt", default="a photo of sks person")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("finetune", help="personalize a model on one subject")
    p.add_argument("data")
    model_args(p)
    p.add_argument("--subject", default=None)
    p.add_argument("--mode", choices=[m.value for m in FinetuneMode], default="lowrank")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--prompt", default="a photo of sks person")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="sample from a personalized checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--adapters", default=None)
    p.add_argument("--prompt", default="a photo of sks person")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-steps", type=int, default=30)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("purify", help="apply one purification to a directory")
    p.add_argument("input_dir")
    p.add_argument("--spec", required=True,
                   help="noise_s8 | blur_k5 | jpeg_q70 | resize_0.5x | resize_2x")
    common(p)
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser("evaluate", help="distances and proxy similarity of two image sets")
    p.add_argument("set_a")
    p.add_argument("set_b")
    p.add_argument("--proxy", default=None, help="pinned proxy encoder checkpoint")
    p.add_argument("--proxy-steps", type=int, default=200)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a full experiment spec")
    p.add_argument("spec")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render tables and plots from a metrics CSV")
    p.add_argument("metrics_csv")
    common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
