"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

RC = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_log(rows: Sequence[dict], path) -> None:
    """Loss per split and validation mIoU against epoch."""
    with plt.rc_context(RC):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        for split, style in (("train", "-"), ("val", "--")):
            sel = [r for r in rows if r["split"] == split]
            if not sel:
                continue
            ep = [int(r["epoch"]) for r in sel]
            a.plot(ep, [float(r["loss_total"]) for r in sel], style, label=split)
            b.plot(ep, [float(r["miou"]) for r in sel], style, label=split)
        a.set(xlabel="epoch", ylabel="total loss", yscale="log")
        b.set(xlabel="epoch", ylabel="mIoU [%]")
        a.legend()
        _save(fig, path)


def plot_f1_curve(thresholds, curve, path, label: str | None = None) -> None:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(thresholds, curve, label=label)
        if np.isfinite(curve).any():
            k = int(np.nanargmax(curve))
            ax.plot([thresholds[k]], [curve[k]], "o", color="C3")
            ax.annotate(f"ODS {curve[k]:.1f} @ {thresholds[k]:.2f}", (thresholds[k], curve[k]),
                        textcoords="offset points", xytext=(5, -12))
        ax.set(xlabel="threshold", ylabel="mean F1 [%]", xlim=(0, 1))
        _save(fig, path)


def plot_erf(erf, path, title: str = "") -> None:
    """Log-scaled ERF heatmap with the theoretical RF box outlined."""
    E = erf.normalized
    with plt.rc_context({**RC, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(4, 4))
        floor = 1e-4
        im = ax.imshow(np.log10(np.maximum(E, floor)), cmap="magma", vmin=math.log10(floor), vmax=0)
        box = erf.rf_box()
        if box is not None:
            t, l, b, r = box
            ax.add_patch(Rectangle((l - 0.5, t - 0.5), r - l + 1, b - t + 1, fill=False, ec="lime", lw=1))
            h, w = E.shape
            ax.set_xlim(min(-0.5, l - 1), max(w - 0.5, r + 1))
            ax.set_ylim(max(h - 0.5, b + 1), min(-0.5, t - 1))
        ax.plot([erf.center[1]], [erf.center[0]], "+", color="cyan")
        fig.colorbar(im, ax=ax, fraction=0.046, label="log10 E / max")
        ax.set_title(title or f"ERF (n={erf.n_samples}, support {erf.support()} px)")
        _save(fig, path)


def plot_attention_stats(stats: dict, path) -> None:
    """One bar group per resolution level, one bar per pixel group."""
    groups = [g for g in ("all", "edge_free", "edge") if g in stats]
    K = len(stats[groups[0]])
    x = np.arange(K)
    width = 0.8 / len(groups)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        for n, g in enumerate(groups):
            ax.bar(x + (n - (len(groups) - 1) / 2) * width, stats[g], width, label=g.replace("_", "-"))
        ax.set_xticks(x, [f"1/{2**k}" for k in x])
        ax.set(xlabel="resolution level", ylabel="mean attention")
        ax.legend()
        _save(fig, path)


def plot_prediction(sar: np.ndarray, seg: np.ndarray, edge: np.ndarray, gt_mask: np.ndarray, path) -> None:
    with plt.rc_context({**RC, "axes.grid": False}):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
        panels = [(sar[0], "gray", "HH [dB]"), (gt_mask, "gray", "ground truth"),
                  (seg, "viridis", "segmentation"), (edge, "inferno", "edge")]
        for ax, (img, cmap, title) in zip(axes, panels):
            ax.imshow(img, cmap=cmap)
            ax.set_title(title)
            ax.set_axis_off()
        _save(fig, path)


def plot_ablation(rows: Sequence[dict], metric: str, path) -> None:
    """Horizontal bars of one metric (mean with std error bars) per ablation cell."""
    labels = [r["label"] for r in rows]
    means = np.array([r[f"{metric}_mean"] for r in rows], dtype=float)
    stds = np.nan_to_num(np.array([r[f"{metric}_std"] for r in rows], dtype=float))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 0.35 * len(rows) + 1.2))
        ax.barh(np.arange(len(rows)), means, xerr=stds, color="C0")
        ax.set_yticks(np.arange(len(rows)), labels)
        ax.invert_yaxis()
        ax.set_xlabel(metric)
        _save(fig, path)
