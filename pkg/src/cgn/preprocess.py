"""Mammogram normalisation: bit-depth mapping, Otsu segmentation, resize, mirroring."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from cgn import kernels

TARGET_SIZE = 224


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray
    bit_depth: int

    def __post_init__(self):
        if self.bit_depth not in (8, 14):
            raise PreprocessError(f"unsupported bit depth {self.bit_depth}")
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise PreprocessError("expected a 2-D image")
        if px.size and (px.min() < 0 or px.max() >= 2 ** self.bit_depth):
            raise PreprocessError(f"pixel values out of range for {self.bit_depth}-bit image")


def map_14bit_to_8bit(img: RawImage) -> np.ndarray:
    if img.bit_depth != 14:
        raise PreprocessError(f"expected a 14-bit image, got {img.bit_depth}-bit")
    px = np.asarray(img.pixels, dtype=np.int64)
    return (px * 255 // 16383).astype(np.uint8)


def between_class_variance(hist) -> list:
    """Exact (rational) between-class variance for every threshold 0..255.

    Class 0 holds values ``<= t``. Thresholds leaving a class empty score 0.
    """
    hist = [int(v) for v in hist]
    n = sum(hist)
    total = sum(i * h for i, h in enumerate(hist))
    n0 = 0
    s0 = 0
    out = []
    for t in range(256):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            out.append(Fraction(0))
            continue
        # w0 w1 (mu0 - mu1)^2 == (n*s0 - n0*total)^2 / (n^2 n0 n1)
        a = n * s0 - n0 * total
        out.append(Fraction(a * a, n * n * n0 * n1))
    return out


def otsu_threshold(img) -> int:
    """Threshold maximising between-class variance; smallest threshold wins ties."""
    hist = kernels.histogram256(np.asarray(img, dtype=np.uint8))
    if np.count_nonzero(hist) < 2:
        raise PreprocessError("degenerate histogram: image has a single intensity")
    scores = between_class_variance(hist)
    best = max(scores)
    return scores.index(best)


def largest_component(mask) -> np.ndarray:
    """Boolean mask of the largest 4-connected component (first in raster order on ties)."""
    labels, sizes = kernels.label4(np.asarray(mask, dtype=np.uint8))
    if sizes.size <= 1:
        return np.zeros(labels.shape, dtype=bool)
    return labels == int(np.argmax(sizes))


def tight_bbox(mask):
    """(row, col, height, width) of the nonzero pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise PreprocessError("empty mask has no bounding box")
    return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def segment_breast(img):
    """Otsu foreground, largest component kept, background zeroed, cropped to its box.

    Returns ``(cropped_image, foreground_mask)``; the mask has the input's shape.
    """
    a = np.asarray(img, dtype=np.uint8)
    t = otsu_threshold(a)
    fg = largest_component(a > t)
    if not fg.any():
        raise PreprocessError("empty foreground after Otsu thresholding")
    r, c, h, w = tight_bbox(fg)
    cleaned = np.where(fg, a, 0).astype(np.uint8)
    return cleaned[r:r + h, c:c + w], fg


def resize(img, size=TARGET_SIZE) -> np.ndarray:
    a = np.asarray(img)
    if a.size == 0:
        raise PreprocessError("cannot resize an empty image")
    if a.shape == (size, size):
        return a.astype(np.uint8, copy=True)
    out = kernels.bilinear_resize(a.astype(np.float64), size, size)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def resize_to_224(img) -> np.ndarray:
    return resize(img, TARGET_SIZE)


def mirror_reference(img) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[:, ::-1])


def pipeline(img, bit_depth=8) -> np.ndarray:
    """Full normalisation of one image: 8-bit, segmented, 224x224."""
    if bit_depth == 14:
        img = map_14bit_to_8bit(RawImage(np.asarray(img), 14))
    cropped, _ = segment_breast(img)
    return resize_to_224(cropped)


def load_image(path) -> tuple[np.ndarray, int]:
    """Read an 8-bit PNG or a raw 14-bit ``.npy`` array."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        return arr, 14
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8), 8


def save_png(arr, path):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, optimize=False)


def preprocess_dir(in_dir, out_dir):
    """Run the pipeline on every PNG / .npy under ``in_dir``; returns the written paths."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    files = sorted(p for p in in_dir.rglob("*") if p.suffix in (".png", ".npy"))
    if not files:
        raise PreprocessError(f"no .png or .npy images under {in_dir}")
    written = []
    for src in files:
        arr, depth = load_image(src)
        out = pipeline(arr, depth)
        dest = out_dir / src.relative_to(in_dir).with_suffix(".png")
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_png(out, dest)
        written.append(dest)
    return written
