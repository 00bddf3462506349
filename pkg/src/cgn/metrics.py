"""AUC, Fréchet distance between feature populations, and the symmetric-prior test."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from cgn import kernels

log = logging.getLogger(__name__)

FEATURE_ORIGINS = ("target", "reference", "counterfactual", "masked-target", "image-patch")
SHRINKAGE = 1e-6


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    vectors: np.ndarray
    origin: str = "target"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0:
            raise MetricError(f"feature set needs a nonempty N x d matrix, got shape {v.shape}")
        if self.origin not in FEATURE_ORIGINS:
            raise MetricError(f"unknown feature origin {self.origin!r}")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self):
        return self.vectors.shape[1]


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), computed from midranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    u, n_pos, n_neg = kernels.auc_midrank(s, y.astype(np.int64))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    return float(u / (n_pos * n_neg))


def _as_matrix(x):
    return x.vectors if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def gaussian_moments(x):
    v = _as_matrix(x)
    mu = v.mean(axis=0)
    if v.shape[0] > 1:
        cov = np.cov(v, rowvar=False).reshape(v.shape[1], v.shape[1])
    else:
        cov = np.zeros((v.shape[1], v.shape[1]))
    if v.shape[0] <= v.shape[1]:
        cov = cov + SHRINKAGE * np.eye(v.shape[1])
    return mu, cov


def _psd_sqrt(m):
    w, q = np.linalg.eigh((m + m.T) / 2)
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of ``(S_a S_b)^(1/2)`` is taken from the symmetric PSD product
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    ra = _psd_sqrt(cov_a)
    inner = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(a, b) -> float:
    va, vb = _as_matrix(a), _as_matrix(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[0] == 0 or vb.shape[0] == 0:
        raise MetricError("fid needs two nonempty N x d matrices")
    if va.shape[1] != vb.shape[1]:
        raise MetricError(f"feature dimension mismatch: {va.shape[1]} vs {vb.shape[1]}")
    return frechet_distance(*gaussian_moments(va), *gaussian_moments(vb))


def global_pool(maps):
    """(N, C, h, w) -> (N, C) by spatial averaging."""
    return np.asarray(maps, dtype=np.float64).mean(axis=(-2, -1))


def masked_pool(maps, weights):
    """(N, C, h, w) averaged over positions with per-sample weights (N, h, w)."""
    m = np.asarray(maps, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    den = w.sum(axis=(-2, -1))
    if (den <= 0).any():
        raise MetricError("a sample has no lesion-free positions")
    return np.einsum("nchw,nhw->nc", m, w) / den[:, None]


@dataclass
class FidQuartet:
    target_reference: float
    counterfactual_reference: float
    target_counterfactual: float
    masked_target_counterfactual: float | None

    def as_dict(self):
        return {
            "fid_target_reference": self.target_reference,
            "fid_counterfactual_reference": self.counterfactual_reference,
            "fid_target_counterfactual": self.target_counterfactual,
            "fid_masked_target_counterfactual": self.masked_target_counterfactual,
        }


def fid_quartet(h_t, h_r, h_c, gt_masks=None) -> FidQuartet:
    """Four FIDs over (N, C, h, w) feature maps.

    ``gt_masks`` are full-resolution lesion masks; the masked entry pools only
    over feature cells that contain no lesion pixel.
    """
    from cgn.attention_feedback import mask_to_grid

    t, r, c = global_pool(h_t), global_pool(h_r), global_pool(h_c)
    masked = None
    if gt_masks is None:
        log.warning("no ground-truth masks supplied; masked target/counterfactual FID skipped")
    else:
        grid = np.asarray(h_t).shape[-2:]
        free = np.stack([(mask_to_grid(m, grid) == 0).astype(np.float64) for m in gt_masks])
        masked = fid(masked_pool(h_t, free), masked_pool(h_c, free))
    return FidQuartet(fid(t, r), fid(c, r), fid(t, c), masked)


def patch_embedding(images, grid=4):
    """Image-level embedding: mean intensity of each cell of a ``grid x grid`` partition."""
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    n, h, w = a.shape
    rows = np.linspace(0, h, grid + 1).astype(int)
    cols = np.linspace(0, w, grid + 1).astype(int)
    out = np.empty((n, grid * grid))
    for i in range(grid):
        for j in range(grid):
            out[:, i * grid + j] = a[:, rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean(axis=(1, 2))
    return out


def grouped_fids(emb_t, emb_r, group_size=20):
    """One target-vs-reference FID per consecutive group of couples (a trailing partial group is dropped)."""
    emb_t = np.asarray(emb_t)
    emb_r = np.asarray(emb_r)
    if emb_t.shape != emb_r.shape:
        raise MetricError("target and reference embeddings must be aligned")
    n_groups = emb_t.shape[0] // group_size
    if n_groups == 0:
        raise MetricError(f"fewer couples ({emb_t.shape[0]}) than one group of {group_size}")
    return [fid(emb_t[k * group_size:(k + 1) * group_size], emb_r[k * group_size:(k + 1) * group_size])
            for k in range(n_groups)]


def symmetric_prior_test(healthy_fids, unhealthy_fids) -> float:
    """One-sided Welch test of H1: mean(healthy) < mean(unhealthy); returns the p-value."""
    h = np.asarray(healthy_fids, dtype=np.float64)
    u = np.asarray(unhealthy_fids, dtype=np.float64)
    if h.size < 2 or u.size < 2:
        raise MetricError("each group needs at least 2 values")
    if h.var(ddof=1) == 0 and u.var(ddof=1) == 0:
        if h.mean() == u.mean():
            return 0.5
        raise MetricError("degenerate variance in both groups")
    if np.array_equal(np.sort(h), np.sort(u)):
        return 0.5
    return float(stats.ttest_ind(h, u, equal_var=False, alternative="less").pvalue)


def permutation_test(healthy, unhealthy, n_resamples=20000, seed=0) -> float:
    """One-sided permutation p-value for mean(healthy) < mean(unhealthy)."""
    res = stats.permutation_test(
        (np.asarray(healthy, float), np.asarray(unhealthy, float)),
        lambda a, b: np.mean(a) - np.mean(b),
        permutation_type="independent",
        alternative="less",
        n_resamples=n_resamples,
        random_state=np.random.default_rng(seed),
    )
    return float(res.pvalue)


def couple_fid_lists(healthy_pairs, unhealthy_pairs, group_size=20, grid=4):
    """Grouped image-level FIDs for lists of (x_T, x_R_mirrored) couples."""
    def lists(pairs):
        xt = np.stack([p[0] for p in pairs])
        xr = np.stack([p[1] for p in pairs])
        return grouped_fids(patch_embedding(xt, grid), patch_embedding(xr, grid), group_size)

    return lists(healthy_pairs), lists(unhealthy_pairs)
