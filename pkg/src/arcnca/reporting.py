"""Report tables (Markdown, CSV), summary figures and rollout frame export."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import lattice_to_rgba8
from .evaluation import RunReport, TaskResult, group_by_variant

# reference values from the long single-trial runs on the 262 same-size tasks;
# documentation only, never used to gate anything
REFERENCE_SOLVE_RATES = {
    -7.0: {"NCA": 0.107, "v1": 0.065, "v2": 0.092, "v3": 0.129, "v4": 0.103},
    -6.0: {"NCA": 0.156, "v1": 0.099, "v2": 0.118, "v3": 0.164, "v4": 0.168},
}
REFERENCE_MEAN_LOG_LOSS = {"NCA": -4.31, "v1": -3.63, "v2": -4.03, "v3": -4.35, "v4": -4.20}


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}%"


def _fmt(x: float, digits: int = 2) -> str:
    return "n/a" if x != x else f"{x:.{digits}f}"


def render_markdown(report: RunReport) -> str:
    out = io.StringIO()
    out.write("# ARC-NCA run report\n\n")
    out.write("Log losses are natural logarithms of the pixelwise MSE (channels 0-7).\n")
    for t in report.thresholds:
        out.write(f"\n## Solve threshold ln(MSE) <= {t:g}\n\n")
        out.write("| Model | Tasks | Mean ln(loss) | Solve rate | Exact match | Cost ($/task) |\n")
        out.write("|---|---|---|---|---|---|\n")
        for row in report.variants:
            failed = f" ({row.n_failed} failed)" if row.n_failed else ""
            out.write(
                f"| {row.variant} | {row.n_tasks}{failed} | {_fmt(row.mean_log_loss)} | {_pct(row.solve_rates[t])} "
                f"| {_pct(row.exact_rate)} | {row.cost_per_task:.2e} |\n"
            )
        if report.unions:
            out.write("\n| Union | Mean ln(loss) | Solve rate | Exact match |\n")
            out.write("|---|---|---|---|\n")
            for u in report.unions:
                out.write(f"| {u.name} | {_fmt(u.mean_log_loss)} | {_pct(u.solve_rates[t])} | {_pct(u.exact_rate)} |\n")
    return out.getvalue()


CSV_COLUMNS = ["kind", "model", "threshold", "n_tasks", "mean_log_loss", "solve_rate", "exact_match_rate", "cost_per_task"]


def render_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for t in report.thresholds:
        for row in report.variants:
            writer.writerow(
                ["variant", row.variant, t, row.n_tasks, f"{row.mean_log_loss:.6f}", f"{row.solve_rates[t]:.6f}", f"{row.exact_rate:.6f}", f"{row.cost_per_task:.6e}"]
            )
        n = report.variants[0].n_tasks if report.variants else 0
        for u in report.unions:
            writer.writerow(["union", "|".join(u.members), t, n, f"{u.mean_log_loss:.6f}", f"{u.solve_rates[t]:.6f}", f"{u.exact_rate:.6f}", ""])
    return buf.getvalue()


def plot_report(report: RunReport, results: Sequence[TaskResult], out_dir: str | Path) -> list[Path]:
    """Solve-rate bars per threshold and per-variant log-loss histograms."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    labels = [r.variant for r in report.variants] + [u.name for u in report.unions]
    x = np.arange(len(labels))
    width = 0.8 / max(len(report.thresholds), 1)
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(labels) + 2), 3.6))
    for i, t in enumerate(report.thresholds):
        rates = [r.solve_rates[t] for r in report.variants] + [u.solve_rates[t] for u in report.unions]
        ax.bar(x + (i - (len(report.thresholds) - 1) / 2) * width, np.array(rates) * 100, width, label=f"ln(MSE) <= {t:g}")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("solve rate (%)")
    ax.legend(frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    paths.append(out_dir / "solve_rates.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    by_variant = group_by_variant(results)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    bins = np.linspace(-30, 0, 31)
    for name, rs in by_variant.items():
        losses = [r.log_loss for r in rs if r.ok]
        if losses:
            ax.hist(losses, bins=bins, histtype="step", label=name)
    for t in report.thresholds:
        ax.axvline(t, color="0.4", lw=0.8, ls="--")
    ax.set_xlabel("ln(MSE) on test pair")
    ax.set_ylabel("tasks")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    paths.append(out_dir / "log_loss_hist.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths


def write_report(report: RunReport, results: Sequence[TaskResult], out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"markdown": out_dir / "report.md", "csv": out_dir / "report.csv"}
    written["markdown"].write_text(render_markdown(report))
    written["csv"].write_text(render_csv(report))
    if figures:
        for p in plot_report(report, results, out_dir / "figures"):
            written[p.stem] = p
    return written


def export_frames(trajectory: Sequence[np.ndarray], directory: str | Path, scale: int = 8, gif: bool = False, frame_ms: int = 80) -> list[Path]:
    """Write ``frame_%05d.png`` per state (RGBA channels) and optionally ``rollout.gif``."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images, paths = [], []
    for i, lattice in enumerate(trajectory):
        img = Image.fromarray(lattice_to_rgba8(np.asarray(lattice), scale))
        path = directory / f"frame_{i:05d}.png"
        img.save(path)
        paths.append(path)
        images.append(img)
    if gif and images:
        # GIF has no partial alpha; composite on black so dead cells read as background
        frames = [Image.alpha_composite(Image.new("RGBA", im.size, (0, 0, 0, 255)), im).convert("RGB") for im in images]
        frames[0].save(directory / "rollout.gif", save_all=True, append_images=frames[1:], duration=frame_ms, loop=0)
    return paths
