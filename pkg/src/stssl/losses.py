"""Supervised, consistency and attention-weighted consistency losses.

Localization tensors have time, height and width as their last three axes;
a leading batch axis is optional. Batched losses average per-sample values.
Attention masks are always built under ``torch.no_grad`` and returned
detached, so the consistency gradient never flows through them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

MODES = ("supervised", "semi-cc", "semi-lc", "semi-var", "semi-grad", "semi-both")
DICE_EPS = 1e-6
NORM_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_total: float = 0.1
    lambda_cls: float = 0.3
    lambda_loc: float = 0.7
    w: float = 0.0

    def __post_init__(self):
        for name in ("lambda_total", "lambda_cls", "lambda_loc", "w"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.w > 1:
            raise ValueError("w must lie in [0, 1]")


# ---------------------------------------------------------------------------
# supervised terms


def margin_loss(class_scores, labels, m_plus: float = 0.9, m_minus: float = 0.1,
                down_weight: float = 0.5) -> torch.Tensor:
    """Capsule margin loss, summed over classes and averaged over the batch."""
    scores = torch.as_tensor(class_scores)
    single = scores.ndim == 1
    if single:
        scores = scores[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    k = scores.shape[-1]
    if labels.numel() != scores.shape[0]:
        raise ValueError("one label per score vector is required")
    if (labels < 0).any() or (labels >= k).any():
        raise ValueError(f"label out of range for {k} classes: {labels.tolist()}")
    target = F.one_hot(labels, k).to(scores.dtype)
    pos = target * torch.clamp(m_plus - scores, min=0.0) ** 2
    neg = down_weight * (1.0 - target) * torch.clamp(scores - m_minus, min=0.0) ** 2
    return (pos + neg).sum(-1).mean()


def bce_dice_loss(pred, gt) -> torch.Tensor:
    """Mean binary cross-entropy plus soft dice loss, per sample then averaged."""
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt).to(torch.as_tensor(pred).dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
    p = pred.reshape(pred.shape[0], -1)
    g = gt.reshape(gt.shape[0], -1)
    tiny = torch.finfo(p.dtype).tiny
    bce = -(g * torch.log(p.clamp_min(tiny)) + (1 - g) * torch.log((1 - p).clamp_min(tiny))).mean(-1)
    dice = 1.0 - (2.0 * (p * g).sum(-1) + DICE_EPS) / (p.sum(-1) + g.sum(-1) + DICE_EPS)
    return (bce + dice).mean()


# ---------------------------------------------------------------------------
# classification consistency


def jsd(p, q) -> torch.Tensor:
    """Jensen-Shannon divergence in nats between distributions on the last axis."""
    p, q = torch.as_tensor(p), torch.as_tensor(q)
    m = 0.5 * (p + q)
    kl_pm = torch.special.xlogy(p, p) - torch.special.xlogy(p, m)
    kl_qm = torch.special.xlogy(q, q) - torch.special.xlogy(q, m)
    return 0.5 * kl_pm.sum(-1) + 0.5 * kl_qm.sum(-1)


def jsd_consistency(feat_a, feat_b) -> torch.Tensor:
    """JSD between softmax distributions of two feature vectors (batch mean)."""
    feat_a, feat_b = torch.as_tensor(feat_a), torch.as_tensor(feat_b)
    if not (torch.isfinite(feat_a).all() and torch.isfinite(feat_b).all()):
        raise ValueError("jsd_consistency received non-finite features")
    log_p = torch.log_softmax(feat_a, dim=-1)
    log_q = torch.log_softmax(feat_b, dim=-1)
    log_m = torch.logsumexp(torch.stack([log_p, log_q]), dim=0) - math.log(2.0)
    p, q = log_p.exp(), log_q.exp()
    value = 0.5 * (p * (log_p - log_m)).sum(-1) + 0.5 * (q * (log_q - log_m)).sum(-1)
    # rounding can leave a tiny negative value for identical inputs
    return value.clamp_min(0.0).mean()


# ---------------------------------------------------------------------------
# localization consistency


def _masked_mean(values, valid):
    valid = torch.as_tensor(valid).to(values.dtype)
    if values.ndim == 3:
        values, valid = values[None], valid[None]
    valid = valid.expand_as(values)
    counts = valid.reshape(valid.shape[0], -1).sum(-1)
    if (counts == 0).any():
        raise ValueError("consistency loss needs at least one valid pixel per sample")
    sums = (values * valid).reshape(values.shape[0], -1).sum(-1)
    return (sums / counts).mean()


def _check_pair(loc_a, loc_b):
    if loc_a.shape != loc_b.shape:
        raise ValueError(f"shape mismatch: {tuple(loc_a.shape)} vs {tuple(loc_b.shape)}")


def l2_consistency(loc_a, loc_b_inv, valid) -> torch.Tensor:
    """Mean squared difference over valid pixels."""
    _check_pair(loc_a, loc_b_inv)
    return _masked_mean((loc_a - loc_b_inv) ** 2, valid)


def coherence_loss(loc_a, loc_b_inv, valid, mask, w: float) -> torch.Tensor:
    """Blend of the variance-attended and the plain squared difference."""
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    _check_pair(loc_a, loc_b_inv)
    sq = (loc_a - loc_b_inv) ** 2
    mask = mask.detach()
    return w * _masked_mean(mask * sq, valid) + (1.0 - w) * _masked_mean(sq, valid)


def gradient_smoothness_loss(loc_a, loc_b_inv, valid, mask) -> torch.Tensor:
    """Squared difference attended by the temporal second-derivative mask."""
    _check_pair(loc_a, loc_b_inv)
    return _masked_mean(mask.detach() * (loc_a - loc_b_inv) ** 2, valid)


# ---------------------------------------------------------------------------
# attention masks


def normalize_mask(mask: torch.Tensor) -> torch.Tensor:
    """Per-clip min-max scaling of a (..., T, H, W) mask to [0, 1]."""
    flat = mask.reshape(*mask.shape[:-3], -1)
    lo = flat.min(-1).values[..., None, None, None]
    hi = flat.max(-1).values[..., None, None, None]
    return (mask - lo) / (hi - lo + NORM_EPS)


@torch.no_grad()
def variance_mask(loc_seq, window_past: int = 2, window_future: int = 2, cyclic: bool = False,
                  normalize: bool = True) -> torch.Tensor:
    """Per-pixel variance over a window of frames centred on each frame.

    Windows wrap around for cyclic sequences and are clamped (edge frames
    repeated) otherwise.
    """
    loc_seq = torch.as_tensor(loc_seq).detach()
    length = loc_seq.shape[-3]
    n = window_past + window_future + 1
    if not cyclic and length < n:
        raise ValueError(f"sequence of {length} frames is shorter than the {n}-frame window")
    offsets = torch.arange(-window_past, window_future + 1)
    idx = torch.arange(length)[:, None] + offsets[None, :]  # L x n
    idx = idx % length if cyclic else idx.clamp(0, length - 1)
    windows = loc_seq[..., idx.reshape(-1), :, :]
    windows = windows.reshape(*loc_seq.shape[:-3], length, n, *loc_seq.shape[-2:])
    mu = windows.mean(dim=-3, keepdim=True)
    var = ((windows - mu) ** 2).sum(dim=-3) / n
    return normalize_mask(var) if normalize else var


@torch.no_grad()
def coherence_mask(loc_orig, loc_aug_inv, window: int = 2, normalize: bool = True) -> torch.Tensor:
    """Cyclic-variance mask for the original clip's frames.

    The original view is extended with the temporally flipped second view so
    the windows of the first and last frames wrap onto second-view
    predictions instead of being clamped.
    """
    from .augment import build_cyclic_sequence

    n = loc_orig.shape[-3]
    seq = build_cyclic_sequence(loc_orig.detach(), loc_aug_inv.detach())
    var = variance_mask(seq, window, window, cyclic=True, normalize=False)[..., :n, :, :]
    return normalize_mask(var) if normalize else var


@torch.no_grad()
def gradient_mask(loc_seq, normalize: bool = True) -> torch.Tensor:
    """Absolute temporal second derivative from two nested central differences.

    The two frames at each end have no centred estimate and copy the nearest
    interior frame.
    """
    loc_seq = torch.as_tensor(loc_seq).detach()
    length = loc_seq.shape[-3]
    if length < 5:
        raise ValueError(f"gradient mask needs at least 5 frames, got {length}")
    d1 = (loc_seq[..., 2:, :, :] - loc_seq[..., :-2, :, :]) / 2.0  # frames 1 .. L-2
    d2 = (d1[..., 2:, :, :] - d1[..., :-2, :, :]) / 2.0  # frames 2 .. L-3
    d2 = d2.abs()
    first, last = d2[..., :1, :, :], d2[..., -1:, :, :]
    mask = torch.cat([first, first, d2, last, last], dim=-3)
    return normalize_mask(mask) if normalize else mask


# ---------------------------------------------------------------------------
# objective


def total_loss(supervised_cls, supervised_loc, cls_const, loc_const, weights: LossWeights,
               mode: str):
    """Combine the terms into the training objective.

    Returns the scalar loss and a breakdown dict of plain floats. ``loc_const``
    is whichever localization variant the mode selects (plain, coherence or
    gradient smoothness). Negative weights raise ``ValueError``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if min(weights.lambda_total, weights.lambda_cls, weights.lambda_loc, weights.w) < 0:
        raise ValueError("loss weights must be non-negative")
    zero = torch.zeros((), dtype=torch.as_tensor(supervised_cls).dtype)
    # every semi-supervised mode keeps the classification term; semi-cc drops localization
    use_cc = mode != "supervised"
    use_lc = mode not in ("supervised", "semi-cc")
    cc = cls_const if use_cc and cls_const is not None else zero
    lc = loc_const if use_lc and loc_const is not None else zero
    labeled = supervised_cls + supervised_loc
    const = weights.lambda_cls * cc + weights.lambda_loc * lc
    total = labeled + weights.lambda_total * const
    breakdown = {
        "L_sup_cls": float(torch.as_tensor(supervised_cls).detach()),
        "L_sup_loc": float(torch.as_tensor(supervised_loc).detach()),
        "L_cc": float(torch.as_tensor(cc).detach()),
        "L_lc": float(torch.as_tensor(lc).detach()),
        "w": float(weights.w),
        "lambda": float(weights.lambda_total),
        "total": float(total.detach()),
    }
    return total, breakdown


def recombine(breakdown: dict, lambda_cls: float, lambda_loc: float) -> float:
    """Recompute the total from a logged breakdown."""
    return (breakdown["L_sup_cls"] + breakdown["L_sup_loc"]
            + breakdown["lambda"] * (lambda_cls * breakdown["L_cc"] + lambda_loc * breakdown["L_lc"]))
