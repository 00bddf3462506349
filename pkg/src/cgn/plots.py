"""Static figures of a finished run: CAM overlays, feature heatmaps, CAM progression."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from cgn import attention_feedback as af  # noqa: E402
from cgn.preprocess import resize  # noqa: E402


class PlotError(ValueError):
    pass


def _load(path, what):
    path = Path(path)
    if not path.is_file():
        raise PlotError(f"{what} not found: {path}")
    return np.load(path, allow_pickle=False)


def _box(ax, bbox, color):
    r, c, h, w = (int(v) for v in bbox)
    ax.add_patch(Rectangle((c - 0.5, r - 0.5), w, h, fill=False, edgecolor=color, linewidth=1.5))


def _upsample(cam, size):
    """CAM rescaled to [0, 255] and resized bilinearly to the image size."""
    c = np.asarray(cam, dtype=np.float64)
    span = c.max() - c.min()
    c = (c - c.min()) / span if span > 0 else np.zeros_like(c)
    return resize(np.floor(c * 255 + 0.5), size).astype(np.float64) / 255.0


def channel_max(h):
    """Per-position maximum over channels of a (C, h, w) map."""
    return np.asarray(h).max(axis=0)


def plot_cam_overlay(run_dir, out_dir=None):
    """One image per test sample: target, CAM of the predicted class, predicted and true boxes."""
    run_dir = Path(run_dir)
    f = _load(run_dir / "features.npz", "features file")
    out = Path(out_dir) if out_dir else run_dir / "plots" / "cam-overlay"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, sid in enumerate(f["ids"]):
        img = f["x_t"][k]
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.imshow(_upsample(f["cam_pred"][k], img.shape[0]), cmap="jet", alpha=0.35, vmin=0, vmax=1)
        _box(ax, f["bboxes"][k], "lime")
        _box(ax, af.cam_to_bbox(f["cam_pred"][k], img.shape[0]).as_tuple(), "red")
        ax.set_title(f"{sid} y={int(f['labels'][k])} p={float(f['p'][k]):.2f}", fontsize=8)
        ax.axis("off")
        p = out / f"{sid}.png"
        fig.savefig(p, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(p)
    return paths


def heatmap_panels(features, k):
    """Channel-max maps of H_T, H_R and H_C for sample ``k`` of a features file."""
    sid = features["ids"][k]
    out = {}
    for key in ("h_t", "h_r", "h_c"):
        h = features[key][k]
        if not np.isfinite(h).all():
            raise PlotError(f"features of sample {sid} ({key}) are missing or not finite")
        out[key] = channel_max(h)
    return out


def plot_feature_heatmaps(run_dir, out_dir=None):
    """Six panels per test sample: target, target with lesion box, mirrored reference and
    channel-max heatmaps of H_T, H_R and H_C."""
    run_dir = Path(run_dir)
    f = _load(run_dir / "features.npz", "features file")
    out = Path(out_dir) if out_dir else run_dir / "plots" / "features"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, sid in enumerate(f["ids"]):
        panels = heatmap_panels(f, k)
        maps = [panels[key] for key in ("h_t", "h_r", "h_c")]
        lo = min(m.min() for m in maps)
        hi = max(m.max() for m in maps)
        fig, axes = plt.subplots(1, 6, figsize=(13, 2.4))
        axes[0].imshow(f["x_t"][k], cmap="gray", vmin=0, vmax=255)
        axes[0].set_title("target", fontsize=8)
        axes[1].imshow(f["x_t"][k], cmap="gray", vmin=0, vmax=255)
        _box(axes[1], f["bboxes"][k], "lime")
        axes[1].set_title("target + lesion box", fontsize=8)
        axes[2].imshow(f["x_r"][k], cmap="gray", vmin=0, vmax=255)
        axes[2].set_title("reference (mirrored)", fontsize=8)
        for ax, m, name in zip(axes[3:], maps, ("H_T", "H_R", "H_C")):
            ax.imshow(m, cmap="viridis", vmin=lo, vmax=hi)
            ax.set_title(f"max over channels {name}", fontsize=8)
        for ax in axes:
            ax.axis("off")
        p = out / f"{sid}.png"
        fig.savefig(p, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(p)
    return paths


def select_snapshots(epochs, every_n_epochs):
    """Indices of saved snapshots at multiples of ``every_n_epochs`` (ascending); the final
    snapshot alone when none matches."""
    epochs = np.asarray(epochs)
    if epochs.size == 0:
        return []
    idx = [int(i) for i in np.argsort(epochs, kind="stable") if epochs[i] % every_n_epochs == 0]
    return idx or [int(np.argmax(epochs))]


def plot_training_progression(run_dir, every_n_epochs=10, out_dir=None):
    """One strip per sample: target and reference with the lesion box, then the CAM at each
    selected epoch."""
    if every_n_epochs < 1:
        raise PlotError("every_n_epochs must be >= 1")
    run_dir = Path(run_dir)
    s = _load(run_dir / "cam_snapshots.npz", "CAM snapshot file")
    out = Path(out_dir) if out_dir else run_dir / "plots" / "progression"
    out.mkdir(parents=True, exist_ok=True)
    chosen = select_snapshots(s["epochs"], every_n_epochs)
    paths = []
    for k, sid in enumerate(s["ids"]):
        img = s["x_t"][k]
        n = 2 + len(chosen)
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
        axes[0].imshow(img, cmap="gray", vmin=0, vmax=255)
        _box(axes[0], s["bboxes"][k], "lime")
        axes[0].set_title("target", fontsize=8)
        axes[1].imshow(s["x_r"][k], cmap="gray", vmin=0, vmax=255)
        axes[1].set_title("reference", fontsize=8)
        for ax, i in zip(axes[2:], chosen):
            ax.imshow(img, cmap="gray", vmin=0, vmax=255)
            ax.imshow(_upsample(s["cam_pred"][i, k], img.shape[0]), cmap="jet", alpha=0.4, vmin=0, vmax=1)
            _box(ax, s["bboxes"][k], "lime")
            ax.set_title(f"epoch {int(s['epochs'][i])}", fontsize=8)
        for ax in axes:
            ax.axis("off")
        p = out / f"{sid}.png"
        fig.savefig(p, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(p)
    return paths, [int(s["epochs"][i]) for i in chosen]
