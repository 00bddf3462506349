"""Prediction feedback (CAM -> lesion weighting) and CAM-based localisation scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from cgn import kernels
from cgn.preprocess import tight_bbox

CAM_THRESHOLD = 0.2
IOU_THRESHOLD = 0.1
OMEGA_VARIANTS = ("minmax", "softmax")


@dataclass(frozen=True)
class OmegaMap:
    values: np.ndarray
    variant: str


@dataclass(frozen=True)
class BBox:
    row: int
    col: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("bbox height and width must be >= 1")

    def as_tuple(self):
        return (self.row, self.col, self.height, self.width)


def omega_from_cam(cam: torch.Tensor, variant="minmax") -> torch.Tensor:
    """Batched Ω over the last two dims of a (N, h, w) or (h, w) tensor."""
    if variant == "softmax":
        flat = cam.reshape(*cam.shape[:-2], -1)
        return torch.softmax(flat, dim=-1).reshape(cam.shape)
    if variant == "minmax":
        lo = cam.amin(dim=(-2, -1), keepdim=True)
        hi = cam.amax(dim=(-2, -1), keepdim=True)
        span = hi - lo
        safe = torch.where(span > 0, span, torch.ones_like(span))
        return torch.where(span > 0, (cam - lo) / safe, torch.zeros_like(cam))
    raise ValueError(f"unknown omega variant {variant!r}; choose from {OMEGA_VARIANTS}")


def cam_to_omega(cam, variant="minmax") -> OmegaMap:
    """softmax: ``exp / sum exp`` over all positions; minmax: rescale to [0, 1] (constant -> 0)."""
    t = torch.as_tensor(np.asarray(cam, dtype=np.float64))
    return OmegaMap(omega_from_cam(t, variant).numpy(), variant)


def nonfeedback_omega(h_t: torch.Tensor, h_c: torch.Tensor) -> torch.Tensor:
    """Ω from target-counterfactual distance instead of the classifier: minmax of ``||H_T - H_C||^2``."""
    return omega_from_cam((h_t - h_c).pow(2).sum(dim=-3), "minmax")


def cam_to_bbox(cam, image_size=224, threshold=CAM_THRESHOLD) -> BBox:
    """Box of the largest 4-connected region above ``threshold * max`` in image coordinates.

    Signed CAMs are shifted by their minimum first. The grid box is scaled by
    ``image_size / h`` (rows) and ``image_size / w`` (columns).
    """
    c = np.asarray(cam, dtype=np.float64)
    if c.min() < 0:
        c = c - c.min()
    h, w = c.shape
    peak = c.max()
    if peak <= 0:
        mask = np.ones_like(c, dtype=bool)
    else:
        labels, sizes = kernels.label4((c > threshold * peak).astype(np.uint8))
        if sizes.size <= 1:
            # nothing strictly above the threshold: keep the argmax cell
            mask = np.zeros_like(c, dtype=bool)
            mask[np.unravel_index(np.argmax(c), c.shape)] = True
        else:
            mask = labels == int(np.argmax(sizes))
    r, col, hh, ww = tight_bbox(mask)
    sy, sx = image_size / h, image_size / w
    return BBox(int(round(r * sy)), int(round(col * sx)), int(round(hh * sy)), int(round(ww * sx)))


def iou(a, b) -> float:
    ra, ca, ha, wa = a.as_tuple() if isinstance(a, BBox) else a
    rb, cb, hb, wb = b.as_tuple() if isinstance(b, BBox) else b
    ih = max(0, min(ra + ha, rb + hb) - max(ra, rb))
    iw = max(0, min(ca + wa, cb + wb) - max(ca, cb))
    inter = ih * iw
    union = ha * wa + hb * wb - inter
    return inter / union if union > 0 else 0.0


def localization_hits(predictions, truths, iou_threshold=IOU_THRESHOLD):
    """Per-sample ``(iou, correct)`` for ``(label, bbox)`` pairs."""
    if len(predictions) != len(truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    out = []
    for (pl, pb), (tl, tb) in zip(predictions, truths):
        v = iou(pb, tb)
        out.append((v, bool(int(pl) == int(tl) and v > iou_threshold)))
    return out


def top1_localization_error(predictions, truths, iou_threshold=IOU_THRESHOLD) -> float:
    """Fraction of samples with a wrong label or a box with IOU <= threshold."""
    hits = localization_hits(predictions, truths, iou_threshold)
    if not hits:
        raise ValueError("no samples to score")
    return 1.0 - sum(ok for _, ok in hits) / len(hits)


def mask_to_grid(mask, grid_shape):
    """Fraction of each feature cell covered by a full-resolution binary mask."""
    m = np.asarray(mask, dtype=np.float64)
    gh, gw = grid_shape
    H, W = m.shape
    if H % gh == 0 and W % gw == 0:
        return m.reshape(gh, H // gh, gw, W // gw).mean(axis=(1, 3))
    rows = np.linspace(0, H, gh + 1).astype(int)
    cols = np.linspace(0, W, gw + 1).astype(int)
    return np.array([[m[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean() for j in range(gw)] for i in range(gh)])


def omega_mass_inside_outside(omegas, masks):
    """Coverage-weighted mean Ω inside and outside the ground-truth lesion masks."""
    inside_num = inside_den = outside_num = outside_den = 0.0
    for om, mk in zip(omegas, masks):
        om = np.asarray(om, dtype=np.float64)
        cover = mask_to_grid(mk, om.shape)
        inside_num += float((om * cover).sum())
        inside_den += float(cover.sum())
        outside_num += float((om * (1 - cover)).sum())
        outside_den += float((1 - cover).sum())
    return inside_num / max(inside_den, 1e-12), outside_num / max(outside_den, 1e-12)
