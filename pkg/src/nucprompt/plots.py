"""Figures for the ``plot`` command. Every function returns the paths it wrote."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

CLASS_COLORS = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324")


def _read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_loss_curves(loss_csv, out_dir) -> list[Path]:
    rows = _read_rows(loss_csv)
    if not rows:
        log.warning("%s has no rows; no loss figure written", loss_csv)
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = np.array([int(r["step"]) for r in rows])
    fig, axes = plt.subplots(1, 4, figsize=(14, 3), constrained_layout=True)
    for ax, key in zip(axes, ("total", "l_cls", "l_reg", "l_count")):
        ax.plot(steps, [float(r[key]) for r in rows], lw=0.8)
        ax.set_title(key)
        ax.set_xlabel("step")
    path = out / "loss_curves.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [path]


def plot_class_pq(metrics_csv, out_dir) -> list[Path]:
    rows = _read_rows(metrics_csv)
    mean = [r for r in rows if r.get("scene") == "mean"]
    if not rows or not mean:
        log.warning("%s has no scores; no PQ figure written", metrics_csv)
        return []
    keys = sorted((k for k in mean[0] if k.startswith("pq_class_")), key=lambda k: int(k.rsplit("_", 1)[1]))
    vals = [float(mean[0][k]) for k in keys]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(1.2 * len(keys) + 2, 3), constrained_layout=True)
    ax.bar(range(len(keys)), np.nan_to_num(vals), color=CLASS_COLORS[: len(keys)])
    ax.set_xticks(range(len(keys)), [k.replace("pq_class_", "class ") for k in keys])
    ax.set_ylim(0, 1)
    ax.set_ylabel("PQ")
    ax.set_title(f"per-class PQ (mPQ {float(mean[0]['mpq']):.3f})")
    path = out / "class_pq.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [path]


def overlay_figure(image, gt_labels, pred_labels, points, classes):
    """Side-by-side panels: image with prompt markers, gt boundaries, predicted instances."""
    from skimage.segmentation import find_boundaries

    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6), constrained_layout=True)
    axes[0].imshow(image)
    for k in np.unique(classes):
        sel = classes == k
        axes[0].scatter(points[sel, 0] - 0.5, points[sel, 1] - 0.5, s=14,
                        c=CLASS_COLORS[int(k) % len(CLASS_COLORS)], label=f"class {k}")
    if len(points):
        axes[0].legend(loc="lower right", fontsize=6)
    axes[0].set_title("prompts")
    shown = image.copy()
    shown[find_boundaries(gt_labels)] = (1.0, 1.0, 0.0)
    axes[1].imshow(shown)
    axes[1].set_title("ground truth")
    axes[2].imshow(np.ma.masked_equal(pred_labels, 0), cmap="tab20", interpolation="nearest")
    axes[2].set_title("predicted instances")
    for ax in axes:
        ax.set_axis_off()
    return fig


def plot_overlays(data_root, predict_dir, out_dir, ids=None) -> list[Path]:
    from PIL import Image

    from .segmenter import PromptSet
    from .synthdata import read_manifest, read_scene

    manifest = read_manifest(data_root)
    entries = {e["id"]: e for e in manifest.entries}
    ids = list(ids) if ids else list(entries)[:4]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid in ids:
        if sid not in entries:
            log.warning("scene %s not in %s; skipped", sid, data_root)
            continue
        scene = read_scene(manifest.root, entries[sid], manifest.n_classes)
        prompts = PromptSet.load(Path(predict_dir) / "prompts" / f"{sid}.json")
        with Image.open(Path(predict_dir) / "masks" / f"{sid}.png") as img:
            pred = np.array(img).astype(np.int64)
        fig = overlay_figure(scene.image, scene.instance_map, pred, prompts.points, prompts.classes)
        path = out / f"overlay_{sid}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written

