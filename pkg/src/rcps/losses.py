"""Segmentation, rectified pseudo-supervision and loss composition.

Probability and logit tensors are laid out (B, C, *spatial); label tensors
(B, *spatial). Per-voxel maps come back as (B, *spatial).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F

EPS = 1e-8
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1
    temperature_T: float = 0.5
    temperature_tau: float = 0.1
    epsilon: float = EPS
    consistency_weight: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.temperature_T <= 0 or self.temperature_tau <= 0:
            raise ValueError("temperatures must be > 0")
        if not 0 < self.epsilon <= 1e-4:
            raise ValueError("epsilon must lie in (0, 1e-4]")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")


@dataclass
class LossReport:
    seg: float = 0.0
    rectified_pseudo: float = 0.0
    contrastive: float = 0.0
    total_supervised: float = 0.0
    total_unsupervised: float = 0.0
    uncertainty_mean: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def cross_entropy(probs: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean over voxels of -log(p_y + eps)."""
    picked = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return -torch.log(picked + eps).mean()


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH,
              include_background: bool = False) -> torch.Tensor:
    """Soft Dice loss averaged over classes; sums run over the whole batch."""
    num_classes = probs.shape[1]
    onehot = F.one_hot(target, num_classes).movedim(-1, 1).to(probs.dtype)
    dims = [0] + list(range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    per_class = 1.0 - (2.0 * inter + smooth) / (denom + smooth)
    start = 0 if include_background else 1
    return per_class[start:].mean()


def seg_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = EPS,
             include_background: bool = False) -> torch.Tensor:
    """Cross entropy plus Dice, unit weights."""
    if probs.ndim != target.ndim + 1 or probs.shape[:1] + probs.shape[2:] != target.shape:
        raise ValueError(f"probabilities {tuple(probs.shape)} incompatible with labels {tuple(target.shape)}")
    if target.numel() and int(target.max()) >= probs.shape[1]:
        raise ValueError("label value exceeds number of classes")
    return cross_entropy(probs, target, eps) + dice_loss(probs, target, include_background=include_background)


def sharpen(logits: torch.Tensor, T: float) -> torch.Tensor:
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return torch.softmax(logits / T, dim=1)


def pseudo_sup_loss(probs_view: torch.Tensor, logits: torch.Tensor, T: float,
                    eps: float = EPS) -> torch.Tensor:
    """Per-voxel soft cross entropy of a view against the sharpened, detached target."""
    _same_shape(probs_view, logits, "pseudo_sup_loss")
    target = sharpen(logits.detach(), T)
    return -(target * torch.log(probs_view + eps)).sum(1)


def kl_map(probs_view: torch.Tensor, probs_ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-voxel KL(ref || view) = sum_c ref_c log((ref_c + eps) / (view_c + eps))."""
    _same_shape(probs_view, probs_ref, "kl_map")
    return (probs_ref * torch.log((probs_ref + eps) / (probs_view + eps))).sum(1)


def uncertainty_rectified_loss(probs_view: torch.Tensor, logits: torch.Tensor,
                               probs_ref: torch.Tensor, T: float, eps: float = EPS,
                               return_kl: bool = False):
    """Voxel-wise exp(-KL) weighted pseudo supervision plus the KL itself, averaged."""
    _same_shape(probs_view, probs_ref, "uncertainty_rectified_loss")
    probs_ref = probs_ref.detach()
    kl = kl_map(probs_view, probs_ref, eps)
    lp = pseudo_sup_loss(probs_view, logits, T, eps)
    loss = (torch.exp(-kl) * lp + kl).mean()
    return (loss, kl) if return_kl else loss


def consistency_loss(probs_a: torch.Tensor, probs_b: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean per-voxel cosine distance between two class-probability maps."""
    _same_shape(probs_a, probs_b, "consistency_loss")
    dot = (probs_a * probs_b).sum(1)
    norms = probs_a.norm(dim=1) * probs_b.norm(dim=1)
    return (1.0 - dot / norms.clamp_min(eps)).mean()


def rectified_pseudo_loss(probs_v1: torch.Tensor, probs_v2: torch.Tensor, logits: torch.Tensor,
                          T: float, eps: float = EPS, consistency_weight: float = 1.0,
                          return_kl: bool = False):
    """Rectified pseudo supervision of both views against the original prediction.

    ``logits`` (and the softmax derived from it) never receive gradient.
    With ``return_kl`` the mean per-voxel KL over both views is also returned.
    """
    logits = logits.detach()
    probs_ref = torch.softmax(logits, dim=1)
    l1, kl1 = uncertainty_rectified_loss(probs_v1, logits, probs_ref, T, eps, return_kl=True)
    l2, kl2 = uncertainty_rectified_loss(probs_v2, logits, probs_ref, T, eps, return_kl=True)
    loss = l1 + l2 + consistency_weight * consistency_loss(probs_v1, probs_v2, eps)
    if return_kl:
        return loss, 0.5 * (kl1.mean() + kl2.mean()).detach()
    return loss


def compose_losses(rp, bc, alpha: float, beta: float, seg=None):
    """Weighted total: seg + alpha * rp + beta * bc (seg omitted for unlabeled data)."""
    total = alpha * rp + beta * bc
    if seg is not None:
        total = seg + total
    return total


def total_losses(rp, bc, weights: LossWeights, seg=None, labeled: bool = False,
                 alpha: Optional[float] = None, beta: Optional[float] = None,
                 uncertainty_mean: float = 0.0) -> LossReport:
    """Build a LossReport for one subset; ``alpha``/``beta`` override the weights (schedules)."""
    if labeled and seg is None:
        raise ValueError("supervised path requires a segmentation loss (missing labels)")
    a = weights.alpha if alpha is None else alpha
    b = weights.beta if beta is None else beta
    total = float(compose_losses(rp, bc, a, b, seg if labeled else None))
    return LossReport(
        seg=float(seg) if labeled else 0.0,
        rectified_pseudo=float(rp),
        contrastive=float(bc),
        total_supervised=total if labeled else 0.0,
        total_unsupervised=0.0 if labeled else total,
        uncertainty_mean=float(uncertainty_mean),
    )
