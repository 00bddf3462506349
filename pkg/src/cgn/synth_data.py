"""Synthetic bilateral mammogram pairs with the symmetric prior built in.

Each patient has one anatomy, shared by both breasts: a breast-shaped
foreground, smooth tissue texture and a few lesion-like dense blobs. It is
warped independently for each side by a small elastic field and the
reference is stored in its own (mirrored) orientation. Exactly one lesion is
stamped on the target. Malignant lesions have a spiculated boundary, benign
ones a smooth one; the distractor blobs come in both morphologies, so a
single view cannot tell which blob matters without the other side.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from cgn.preprocess import largest_component, load_image, mirror_reference, save_png, tight_bbox

SPLIT_RATIO = (8, 1, 1)
_MIN_TISSUE = 40


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 224
    n_samples: int = 2000
    lesion_radius_range: tuple = (14, 24)
    texture_scale: float = 6.0
    malign_fraction: float = 0.5
    lesion_contrast: float = 70.0
    jitter_px: float = 4.0
    distractor_range: tuple = (2, 5)
    ref_lesion_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesion_radius_range", tuple(self.lesion_radius_range))
        object.__setattr__(self, "distractor_range", tuple(self.distractor_range))
        self.validate()

    def validate(self):
        lo, hi = self.lesion_radius_range
        if self.image_size < 32:
            raise SynthConfigError("image_size must be at least 32")
        if not 1 <= lo <= hi:
            raise SynthConfigError("lesion_radius_range must satisfy 1 <= min <= max")
        if hi >= self.image_size / 4:
            raise SynthConfigError("lesion_radius_range max must be below image_size / 4")
        if not 0.0 <= self.malign_fraction <= 1.0:
            raise SynthConfigError("malign_fraction must lie in [0, 1]")
        if not 0.0 <= self.lesion_contrast <= 255.0:
            raise SynthConfigError("lesion_contrast must lie in [0, 255]")
        if self.jitter_px < 0 or self.texture_scale <= 0:
            raise SynthConfigError("jitter_px must be >= 0 and texture_scale > 0")
        if self.n_samples < 0:
            raise SynthConfigError("n_samples must be >= 0")
        d_lo, d_hi = self.distractor_range
        if not 0 <= d_lo <= d_hi:
            raise SynthConfigError("distractor_range must satisfy 0 <= min <= max")
        if not 0.0 <= self.ref_lesion_prob <= 1.0:
            raise SynthConfigError("ref_lesion_prob must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SynthConfigError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BilateralSample:
    x_T: np.ndarray
    x_R: np.ndarray
    y_T: int
    lesion_mask: np.ndarray
    bbox: tuple
    sample_id: str
    ref_lesion_mask: np.ndarray = field(repr=False, default=None)
    foreground: np.ndarray = field(repr=False, default=None)
    patient_id: str = ""


# -- shapes -------------------------------------------------------------------


def _polar(shape, cy, cx, r0=0, c0=0):
    yy, xx = np.mgrid[r0:r0 + shape[0], c0:c0 + shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    return np.hypot(dy, dx), np.arctan2(dy, dx)


def blob_profile(size, cy, cx, radius, malignant, rng, edge=1.2):
    """Soft [0, 1] intensity profile of one lesion-like blob on a ``size x size`` grid."""
    if malignant:
        n_spikes = int(rng.integers(4, 7))
        phases = rng.uniform(0, 2 * np.pi) + np.arange(n_spikes) * 2 * np.pi / n_spikes
        phases = phases + rng.normal(0, 0.2, n_spikes)
        lengths = rng.uniform(0.8, 1.3, n_spikes)
        reach = 0.6 + lengths.max()
    else:
        phase = rng.uniform(0, 2 * np.pi)
        reach = 1.08
    # the profile is below 1e-6 beyond reach * radius + 17 * edge
    half = int(np.ceil(reach * radius + 17 * edge))
    r0, r1 = max(int(cy) - half, 0), min(int(cy) + half + 2, size)
    c0, c1 = max(int(cx) - half, 0), min(int(cx) + half + 2, size)
    out = np.zeros((size, size))
    if r0 >= r1 or c0 >= c1:
        return out
    rho, theta = _polar((r1 - r0, c1 - c0), cy, cx, r0, c0)
    if malignant:
        boundary = 0.6 * radius * np.ones_like(theta)
        for ph, ln in zip(phases, lengths):
            ang = np.angle(np.exp(1j * (theta - ph)))
            boundary = np.maximum(boundary, 0.6 * radius + ln * radius * np.exp(-(ang / 0.3) ** 2))
    else:
        boundary = radius * (1.0 + 0.08 * np.sin(2 * theta + phase))
    out[r0:r1, c0:c1] = 1.0 / (1.0 + np.exp(-(boundary - rho) / edge))
    return out


def _breast_foreground(size, rng):
    # half-ellipse on the chest wall (column 0) touching every image edge, so the
    # tight box of the foreground is the whole frame
    a = rng.uniform(0.55, 0.65) * size
    b = rng.uniform(1.0, 1.1) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2.0
    d2 = ((yy - cy) / a) ** 2 + (xx / b) ** 2
    return d2 <= 1.0, d2


def _place(fg_dist2, rng, radius, taken, size, tries=500):
    """Random centre well inside the breast and clear of earlier blobs."""
    for _ in range(tries):
        cy = rng.uniform(radius * 2, size - radius * 2)
        cx = rng.uniform(radius * 2, size - radius * 2)
        iy, ix = int(cy), int(cx)
        if fg_dist2[iy, ix] > 0.55:
            continue
        if all(np.hypot(cy - ty, cx - tx) > 1.6 * (radius + tr) for ty, tx, tr in taken):
            return cy, cx
    return None


def _elastic(field, magnitude, rng, smooth=24.0, coarse=8):
    """Warp by a smooth random displacement field peaking at ``magnitude`` pixels.

    The noise is drawn and smoothed on a grid ``coarse`` times smaller, then
    upsampled, which is much cheaper than smoothing at full resolution.
    """
    if magnitude <= 0:
        return field
    size = field.shape[0]
    small = -(-size // coarse)
    disp = []
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.normal(size=(small, small)), smooth / coarse, mode="wrap")
        disp.append(ndimage.zoom(d, size / small, order=1, grid_mode=True, mode="grid-wrap")[:size, :size])
    dy, dx = disp
    peak = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
    dy *= magnitude / peak
    dx *= magnitude / peak
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return ndimage.map_coordinates(field, [yy + dy, xx + dx], order=1, mode="nearest")


def _anatomy(config, rng):
    """Shared (C-like) part of a patient: foreground, texture, distractor blobs."""
    s = config.image_size
    fg, d2 = _breast_foreground(s, rng)
    base = rng.uniform(95, 125)
    texture = ndimage.gaussian_filter(rng.normal(size=(s, s)), config.texture_scale)
    texture *= 14.0 / max(texture.std(), 1e-12)
    falloff = 0.8 + 0.2 * (1.0 - np.clip(d2, 0, 1))
    tissue = (base + texture) * falloff
    lo, hi = config.lesion_radius_range
    taken = []
    n_d = int(rng.integers(config.distractor_range[0], config.distractor_range[1] + 1))
    for _ in range(n_d):
        r = rng.uniform(lo, hi)
        pos = _place(d2, rng, r, taken, s)
        if pos is None:
            continue
        taken.append((pos[0], pos[1], r))
        contrast = config.lesion_contrast * rng.uniform(0.85, 1.15)
        tissue = tissue + contrast * blob_profile(s, pos[0], pos[1], r, bool(rng.random() < 0.5), rng)
    return fg, d2, tissue, taken


def _finish(field, fg):
    img = np.where(fg, np.clip(field, _MIN_TISSUE, 255), 0)
    return np.floor(img + 0.5).astype(np.uint8)


def _rng(config, index, stream):
    return np.random.default_rng([config.seed, index, stream])


def generate_sample(config: SynthConfig, index: int) -> BilateralSample:
    """Deterministic in ``(config.seed, index)``."""
    rng = _rng(config, index, 0)
    s = config.image_size
    fg, d2, tissue, taken = _anatomy(config, rng)
    side_t = _elastic(tissue, config.jitter_px * rng.uniform(0.5, 1.0), rng)
    side_r = _elastic(tissue, config.jitter_px * rng.uniform(0.5, 1.0), rng)

    y = int(rng.random() < config.malign_fraction)
    lo, hi = config.lesion_radius_range
    radius = rng.uniform(lo, hi)
    pos = _place(d2, rng, radius, taken, s) or _place(d2, rng, radius, [], s, tries=10_000)
    profile = blob_profile(s, pos[0], pos[1], radius, bool(y), rng)
    lesion_mask = largest_component(profile > 0.5)
    side_t = side_t + config.lesion_contrast * profile

    ref_mask = np.zeros((s, s), dtype=bool)
    if config.ref_lesion_prob > 0 and rng.random() < config.ref_lesion_prob:
        # reference lesion elsewhere: never on the mirrored target lesion site
        r2 = rng.uniform(lo, hi)
        pos2 = _place(d2, rng, r2, taken + [(pos[0], pos[1], radius)], s)
        if pos2 is not None:
            prof2 = blob_profile(s, pos2[0], pos2[1], r2, bool(rng.random() < 0.5), rng)
            side_r = side_r + config.lesion_contrast * prof2
            ref_mask = mirror_reference(prof2 > 0.5)

    x_t = _finish(side_t, fg)
    x_r = mirror_reference(_finish(side_r, fg))
    return BilateralSample(
        x_T=x_t,
        x_R=x_r,
        y_T=y,
        lesion_mask=lesion_mask.astype(np.uint8),
        bbox=tight_bbox(lesion_mask),
        sample_id=f"s{index:05d}",
        ref_lesion_mask=ref_mask.astype(np.uint8),
        foreground=fg,
        patient_id=f"p{index:05d}",
    )


def generate_healthy_pairs(config: SynthConfig, n: int) -> list:
    """Lesion-free couples from the same anatomy process: ``[(x_T, x_R), ...]``."""
    pairs = []
    for i in range(n):
        rng = _rng(config, i, 1)
        fg, _, tissue, _ = _anatomy(config, rng)
        side_t = _elastic(tissue, config.jitter_px * rng.uniform(0.5, 1.0), rng)
        side_r = _elastic(tissue, config.jitter_px * rng.uniform(0.5, 1.0), rng)
        pairs.append((_finish(side_t, fg), mirror_reference(_finish(side_r, fg))))
    return pairs


# -- dataset on disk -------------------------------------------------------------

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("id", "patient_id", "split", "label", "bbox_row", "bbox_col", "bbox_h", "bbox_w")


def patient_split(patient_ids, seed):
    """Assign patients to train/val/test in 8:1:1 proportion."""
    unique = sorted(set(patient_ids))
    order = np.random.default_rng([seed, 7]).permutation(len(unique))
    n = len(unique)
    n_train = int(round(n * SPLIT_RATIO[0] / sum(SPLIT_RATIO)))
    n_val = int(round(n * SPLIT_RATIO[1] / sum(SPLIT_RATIO)))
    split_of = {}
    for rank, i in enumerate(order):
        split_of[unique[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return split_of


def generate_dataset(config: SynthConfig, out_dir) -> list:
    """Write images, masks, sidecars and ``manifest.csv``; returns the manifest rows."""
    if config.n_samples == 0:
        raise SynthConfigError("empty dataset requested")
    out = Path(out_dir)
    for sub in ("images", "masks", "meta"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    samples_meta = []
    for i in range(config.n_samples):
        smp = generate_sample(config, i)
        try:
            save_png(smp.x_T, out / "images" / f"{smp.sample_id}_T.png")
            save_png(smp.x_R, out / "images" / f"{smp.sample_id}_R.png")
            save_png(smp.lesion_mask * 255, out / "masks" / f"{smp.sample_id}.png")
            meta = {
                "id": smp.sample_id,
                "patient_id": smp.patient_id,
                "label": smp.y_T,
                "bbox": list(smp.bbox),
                "mask": f"masks/{smp.sample_id}.png",
                "images": [f"images/{smp.sample_id}_T.png", f"images/{smp.sample_id}_R.png"],
                "ref_lesion_pixels": int(smp.ref_lesion_mask.sum()),
            }
            (out / "meta" / f"{smp.sample_id}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"failed writing sample {smp.sample_id} under {out}: {exc}") from exc
        samples_meta.append((smp.sample_id, smp.patient_id, smp.y_T, smp.bbox))

    split_of = patient_split([m[1] for m in samples_meta], config.seed)
    rows = []
    for sid, pid, label, bbox in samples_meta:
        rows.append(dict(zip(MANIFEST_FIELDS, (sid, pid, split_of[pid], label, *bbox))))
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    (out / "synth_config.json").write_text(json.dumps(asdict(config), sort_keys=True) + "\n")
    return rows


def read_manifest(data_dir) -> list:
    with open(Path(data_dir) / MANIFEST, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["label"] = int(r["label"])
        for k in ("bbox_row", "bbox_col", "bbox_h", "bbox_w"):
            r[k] = int(r[k])
    return rows


@dataclass
class LoadedSplit:
    ids: list
    x_t: np.ndarray
    x_r: np.ndarray
    labels: np.ndarray
    bboxes: np.ndarray
    masks: np.ndarray


def load_split(data_dir, split) -> LoadedSplit:
    """Load all samples of one split; the reference is returned in its raw orientation."""
    data_dir = Path(data_dir)
    rows = [r for r in read_manifest(data_dir) if r["split"] == split]
    if not rows:
        raise ValueError(f"split {split!r} is empty in {data_dir}")
    xt, xr, masks = [], [], []
    for r in rows:
        xt.append(load_image(data_dir / "images" / f"{r['id']}_T.png")[0])
        xr.append(load_image(data_dir / "images" / f"{r['id']}_R.png")[0])
        masks.append(load_image(data_dir / "masks" / f"{r['id']}.png")[0] > 0)
    return LoadedSplit(
        ids=[r["id"] for r in rows],
        x_t=np.stack(xt),
        x_r=np.stack(xr),
        labels=np.array([r["label"] for r in rows], dtype=np.int64),
        bboxes=np.array([[r["bbox_row"], r["bbox_col"], r["bbox_h"], r["bbox_w"]] for r in rows], dtype=np.int64),
        masks=np.stack(masks),
    )
