"""Loss terms of the joint objective and of the two ablation variants.

Feature-map arguments are (C, h, w) or batched (N, C, h, w) tensors; batched
inputs give one value per sample. Probabilities are clamped to
``[PROB_EPS, 1 - PROB_EPS]`` and every clamp is counted in ``CLAMP_EVENTS``.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CLAMP_EVENTS = Counter()


def _clamp_prob(p, name):
    p = torch.as_tensor(p, dtype=torch.get_default_dtype() if not torch.is_tensor(p) else p.dtype)
    out = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    n = int((out != p).sum())
    if n:
        CLAMP_EVENTS[name] += n
        log.debug("clamped %d probabilities in %s", n, name)
    return out


# -- classification / adversarial / negative embedding ---------------------------


def cls_loss(p_malignant, y_gt):
    """Binary cross entropy of the malignant probability."""
    p = _clamp_prob(p_malignant, "cls_loss")
    y = torch.as_tensor(y_gt, dtype=p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))


def cls_loss_from_logits(logits, y_gt):
    """Same value as :func:`cls_loss` on ``softmax(logits)[:, 1]``, computed stably."""
    return F.cross_entropy(logits, torch.as_tensor(y_gt, dtype=torch.long), reduction="none")


def adversarial_losses(d_on_hr, d_on_hc):
    """``(l_d, l_g)``: discriminator loss ``-log D(H_R) - log(1 - D(H_C))`` and the
    non-saturating generator loss ``-log D(H_C)``."""
    dr = _clamp_prob(d_on_hr, "adversarial_losses")
    dc = _clamp_prob(d_on_hc, "adversarial_losses")
    return -torch.log(dr) - torch.log1p(-dc), -torch.log(dc)


def adversarial_losses_from_logits(logit_hr, logit_hc):
    """Logit form of :func:`adversarial_losses` (``-log sigmoid(z) = softplus(-z)``)."""
    return F.softplus(-logit_hr) + F.softplus(logit_hc), F.softplus(-logit_hc)


def negative_embedding(p_m_of_hc):
    """``-log(1 - p_m(H_C))``: the counterfactual must look benign."""
    p = _clamp_prob(p_m_of_hc, "negative_embedding")
    return -torch.log1p(-p)


def negative_embedding_from_logits(logits):
    """:func:`negative_embedding` on ``softmax(logits)[:, 1]``: ``-log_softmax(logits)[:, 0]``."""
    return -torch.log_softmax(logits, dim=1)[:, 0]


# -- feature distances ----------------------------------------------------------------


def _batched(h):
    return (h[None], True) if h.dim() == 3 else (h, False)


def d_tc(h_t, h_c, omega, denominator="hw-1"):
    """Lesion-free weighted squared distance between target and counterfactual.

    ``sum_ij (1 - omega_ij) ||H_T^ij - H_C^ij||^2 / (h*w - 1)``. With
    ``denominator="mass"`` the sum is divided by ``sum_ij (1 - omega_ij)``.
    """
    if h_t.shape != h_c.shape:
        raise ValueError("h_t and h_c must share one shape")
    a, single = _batched(h_t)
    b, _ = _batched(h_c)
    w = omega if omega.dim() == 3 else omega[None]
    h, wd = a.shape[-2:]
    if w.shape[-2:] != (h, wd):
        raise ValueError(f"omega shape {tuple(w.shape[-2:])} does not match features {(h, wd)}")
    sq = (a - b).pow(2).sum(dim=1)
    num = ((1.0 - w) * sq).sum(dim=(-2, -1))
    if denominator == "hw-1":
        if h * wd == 1:
            raise ValueError("degenerate denominator: h*w - 1 == 0")
        out = num / (h * wd - 1)
    elif denominator == "mass":
        out = num / (1.0 - w).sum(dim=(-2, -1)).clamp_min(1e-12)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    return out[0] if single else out


def pairwise_sq(a, b):
    """(N, P, Q) squared L2 distances between position vectors of (N, C, P) and (N, C, Q)."""
    return (a[:, :, :, None] - b[:, :, None, :]).pow(2).sum(dim=1)


def pairwise_sq_matmul(a, b):
    """Same as :func:`pairwise_sq` via ``|a|^2 + |b|^2 - 2 a.b`` (faster, not bit-exact)."""
    sq = a.pow(2).sum(dim=1)[:, :, None] + b.pow(2).sum(dim=1)[:, None, :] - 2.0 * torch.bmm(a.transpose(1, 2), b)
    return sq.clamp_min(0.0)


def d_rc(h_r, h_c, method="exact"):
    """Symmetric chamfer distance between the spatial positions of two maps.

    ``(sum_ij min_uv ||R^ij - C^uv||^2 + sum_ij min_uv ||C^ij - R^uv||^2) / (2 h w)``.
    ``method="matmul"`` computes the distance table with a batched matrix product.
    """
    if h_r.shape != h_c.shape:
        raise ValueError("h_r and h_c must share one shape")
    a, single = _batched(h_r)
    b, _ = _batched(h_c)
    n, c, h, w = a.shape
    table = {"exact": pairwise_sq, "matmul": pairwise_sq_matmul}[method]
    dist = table(a.reshape(n, c, h * w), b.reshape(n, c, h * w))
    out = (dist.min(dim=2).values.sum(dim=1) + dist.min(dim=1).values.sum(dim=1)) / (2 * h * w)
    return out[0] if single else out


def feedback_triplet(d_tc_value, d_rc_value, beta=1.0):
    """``max{0, d_tc + beta - d_rc}``."""
    return F.relu(torch.as_tensor(d_tc_value) + beta - torch.as_tensor(d_rc_value))


def unit_normalize(h, eps=1e-6):
    """Scale every position vector to unit L2 norm over channels (all-zero vectors stay zero).

    Squared distances between normalised vectors lie in [0, 4], which gives
    the triplet margin a fixed scale.
    """
    return F.normalize(h, dim=-3, eps=eps)


# -- ablation variants --------------------------------------------------------------------


def mask_features(h, omega):
    w = omega if omega.dim() == h.dim() - 1 else omega[None]
    return h * w.unsqueeze(-3)


def variant1_region_losses(h_c, h_r, omega, discriminator):
    """Adversarial pair evaluated on omega-masked features: ``(l_g_omega, l_d_omega)``."""
    hc, _ = _batched(h_c)
    hr, _ = _batched(h_r)
    om = omega if omega.dim() == 3 else omega[None]
    l_d, l_g = adversarial_losses(discriminator(mask_features(hr, om)), discriminator(mask_features(hc, om)))
    return l_g, l_d


def variant1_region_losses_from_logits(h_c, h_r, omega, discriminator):
    l_d, l_g = adversarial_losses_from_logits(
        discriminator.logits(mask_features(h_r, omega)), discriminator.logits(mask_features(h_c, omega))
    )
    return l_g, l_d


def variant2_fc_loss(h_t, h_c, omega, denominator="hw-1"):
    """Direct lesion-free feature consistency; identical to :func:`d_tc`."""
    return d_tc(h_t, h_c, omega, denominator)


# -- joint objective -----------------------------------------------------------------------


@dataclass
class LossBundle:
    l_cls: float = 0.0
    l_ad_g: float = 0.0
    l_ad_d: float = 0.0
    l_ft: float = 0.0
    l_ne: float = 0.0
    d_tc: float = 0.0
    d_rc: float = 0.0

    @property
    def total_g(self):
        return self.l_ad_g + self.l_ne + self.l_ft + self.l_cls

    @property
    def total_d(self):
        return self.l_ad_d


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, index):
        super().__init__(f"non-finite value in loss term {term!r} of sample {index}")
        self.term = term
        self.index = index


def joint_losses(bundles):
    """Sum the per-sample bundles: ``(total_g, total_d)``."""
    total_g = 0.0
    total_d = 0.0
    for k, b in enumerate(bundles):
        for f in fields(b):
            if not math.isfinite(float(getattr(b, f.name))):
                raise NonFiniteLossError(f.name, k)
        total_g += b.l_ad_g + b.l_ne + b.l_ft + b.l_cls
        total_d += b.l_ad_d
    return total_g, total_d
