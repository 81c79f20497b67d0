"""Rendering of metric reports: ranked tables, budget curves, attention grids."""

import csv
import io
import math
from collections import defaultdict
from pathlib import Path

import torch

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from PIL import Image

from ..metrics.report import MetricsReport

# direction of "better" per metric column, for best/second-best flagging:
# lower similarity to references = stronger protection
_METRIC_GOAL = {
    "proxy_sim": "min",
    "ms_ssim_gen": "min",
    "attention_entropy": "max",
    "pca_alignment_k5": "min",
    "pca_alignment_k10": "min",
    "pca_alignment_k20": "min",
    "pca_alignment_k50": "min",
}


def seed_averaged(report: MetricsReport, metric: str) -> dict:
    """{(method, budget, prompt, purification, transfer): mean over seeds+subjects}."""
    groups = defaultdict(list)
    for row in report.rows:
        if metric in row.metrics:
            key = (row.method, row.budget, row.prompt, row.purification, row.transfer)
            groups[key].append(row.metrics[metric])
    return {k: sum(v) / len(v) for k, v in groups.items()}


def rank_flags(values: dict, goal: str) -> dict:
    """Flag the best and second-best entries; missing values get no flag."""
    finite = {k: v for k, v in values.items() if v is not None and not math.isnan(v)}
    order = sorted(finite, key=finite.get, reverse=(goal == "max"))
    flags = {}
    if order:
        flags[order[0]] = "best"
    if len(order) > 1:
        flags[order[1]] = "second"
    return flags


def method_table(report: MetricsReport, metrics=None) -> str:
    """CSV keyed (method x metric), seed-averaged, with best/second flags.

    Gaps stay empty: a method without rows for a metric is never imputed.
    """
    metrics = list(metrics) if metrics else [m for m in _METRIC_GOAL
                                             if any(m in r.metrics for r in report.rows)]
    methods = []
    for row in report.rows:
        label = row.method if row.budget == 0.0 else f"{row.method}@{round(row.budget * 255)}/255"
        if label not in methods:
            methods.append(label)

    cells = {}
    for metric in metrics:
        per_method = defaultdict(list)
        for row in report.rows:
            if metric not in row.metrics:
                continue
            label = (row.method if row.budget == 0.0
                     else f"{row.method}@{round(row.budget * 255)}/255")
            per_method[label].append(row.metrics[metric])
        means = {m: sum(v) / len(v) for m, v in per_method.items()}
        flags = rank_flags(means, _METRIC_GOAL.get(metric, "min"))
        for m in methods:
            if m in means:
                suffix = {"best": " *", "second": " ~"}.get(flags.get(m), "")
                cells[(m, metric)] = f"{means[m]:.4f}{suffix}"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method"] + metrics)
    for m in methods:
        writer.writerow([m] + [cells.get((m, metric), "") for metric in metrics])
    return buf.getvalue()


def budget_curve_plot(report: MetricsReport, metric: str, path) -> None:
    """Seed-averaged metric vs budget, one line per (method, purification)."""
    series = defaultdict(dict)
    for key, value in seed_averaged(report, metric).items():
        method, budget, _prompt, purification, _transfer = key
        label = method if purification == "none" else f"{method}+{purification}"
        series[label][budget] = value
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in sorted(series.items()):
        budgets = sorted(pts)
        ax.plot([b * 255 for b in budgets], [pts[b] for b in budgets],
                marker="o", label=label)
    ax.set_xlabel("budget (8-bit units)")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def attention_grid(maps: torch.Tensor, tokens: list, path) -> None:
    """Per-token grayscale attention maps side by side, upscaled 8x."""
    seq, h, w = maps.shape
    scale = 8
    canvas = Image.new("L", (seq * w * scale + (seq - 1) * 2, h * scale), color=255)
    for i in range(seq):
        m = maps[i]
        rng = float(m.max() - m.min())
        norm = (m - m.min()) / rng if rng > 0 else torch.zeros_like(m)
        tile = Image.fromarray((norm * 255).to(torch.uint8).numpy(), mode="L")
        tile = tile.resize((w * scale, h * scale), Image.NEAREST)
        canvas.paste(tile, (i * (w * scale + 2), 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
    Path(str(path) + ".tokens.txt").write_text("\n".join(tokens))


def write_report(report: MetricsReport, out_dir) -> dict:
    """Render tables and plots for a finished report; returns artifact paths."""
    if not report.rows:
        raise ValueError("cannot report on an empty record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"rows_csv": out / "metrics.csv", "table_csv": out / "method_table.csv"}
    report.save(paths["rows_csv"])
    paths["table_csv"].write_text(method_table(report))
    for metric in ("proxy_sim", "ms_ssim_gen", "attention_entropy", "pca_alignment_k5"):
        if any(metric in r.metrics for r in report.rows):
            p = out / "plots" / f"budget_vs_{metric}.png"
            budget_curve_plot(report, metric, p)
            paths[f"plot_{metric}"] = p
    return paths
