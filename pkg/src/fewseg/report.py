"""Delimited outputs plus rendered figures for runs and evaluations.

Every report path pairs a CSV (machine-readable, full-precision floats)
with a PNG rendering of the same numbers. Figures use the Agg backend and
never open a display.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .evaluate import EvalReport  # noqa: E402

__all__ = ["write_eval_csv", "render_eval_figures", "render_loss_curve",
           "render_prior_overview"]


def write_eval_csv(report: EvalReport, out_dir) -> tuple[Path, Path]:
    """eval_rounds.csv (one row per round) and eval_per_class.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rounds_path = out / "eval_rounds.csv"
    with open(rounds_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("round,seed,episodes,skipped,miou\n")
        for r in report.rounds:
            fh.write(f"{r.index},{r.seed},{r.episodes},{r.skipped},"
                     f"{r.miou!r}\n")
        fh.write(f"mean,,,,{report.mean_miou!r}\n")
    classes_path = out / "eval_per_class.csv"
    with open(classes_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("round,class_id,iou,flagged\n")
        for r in report.rounds:
            for cid in sorted(r.per_class):
                fh.write(f"{r.index},{cid},{r.per_class[cid]!r},"
                         f"{int(cid in r.flagged)}\n")
    return rounds_path, classes_path


def render_eval_figures(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    idx = [r.index for r in report.rounds]
    ax.bar(idx, report.round_mious(), color="#4878cf")
    ax.axhline(report.mean_miou, color="#d65f5f", linestyle="--",
               label=f"mean {report.mean_miou:.3f}")
    ax.set_xlabel("round")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.set_xticks(idx)
    ax.legend()
    fig.tight_layout()
    p = out / "round_miou.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    paths.append(p)

    cids = sorted({c for r in report.rounds for c in r.per_class})
    means = [float(np.mean([r.per_class[c] for r in report.rounds
                            if c in r.per_class])) for c in cids]
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(cids)), 4))
    ax.bar(range(len(cids)), means, color="#6acc65")
    for j, c in enumerate(cids):
        vals = [r.per_class[c] for r in report.rounds if c in r.per_class]
        ax.plot([j] * len(vals), vals, "k.", markersize=4, alpha=0.6)
    ax.set_xticks(range(len(cids)))
    ax.set_xticklabels([str(c) for c in cids])
    ax.set_xlabel("class id")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    p = out / "per_class_iou.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    paths.append(p)
    return paths


def render_loss_curve(log_path, out_path) -> Path:
    steps, cols = [], {"loss_total": [], "loss_co": [], "loss_inter": [],
                       "loss_final": []}
    with open(log_path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for k in cols:
                cols[k].append(float(row[k]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, style in (("loss_total", "-"), ("loss_final", "--"),
                     ("loss_inter", ":"), ("loss_co", "-.")):
        ax.plot(steps, cols[k], style, label=k.replace("loss_", ""),
                linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def render_prior_overview(episode, prior, out_path) -> Path:
    """Support/query context on top, per-window and fused maps below."""
    n_win = len(prior.per_window)
    ncols = max(4, n_win + 1)
    fig, axes = plt.subplots(2, ncols, figsize=(2.6 * ncols, 5.6))
    for ax in axes.ravel():
        ax.set_axis_off()

    sup_img, sup_mask = episode.supports[0]
    panels = [(sup_img, None, "support"), (sup_mask, "gray", "support mask"),
              (episode.query_image, None, "query"),
              (episode.query_mask, "gray", "query mask")]
    for ax, (img, cmap, title) in zip(axes[0], panels):
        ax.imshow(img, cmap=cmap, vmin=0, vmax=1)
        ax.set_title(title, fontsize=9)

    for j, (win, wmap) in enumerate(zip(prior.windows, prior.per_window)):
        axes[1][j].imshow(wmap, cmap="magma", vmin=0, vmax=1)
        axes[1][j].set_title(f"window {tuple(win)}", fontsize=9)
    im = axes[1][n_win].imshow(prior.map, cmap="magma", vmin=0, vmax=1)
    axes[1][n_win].set_title("averaged prior", fontsize=9)
    fig.colorbar(im, ax=axes[1][n_win], fraction=0.046)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
