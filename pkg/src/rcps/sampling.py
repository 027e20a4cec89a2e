"""Confident negative sampling and the bidirectional voxel contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class SamplingConfig:
    num_negatives: int = 400
    anchors_per_image: Optional[int] = None
    detach_negatives: bool = True

    def __post_init__(self):
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.anchors_per_image is not None and self.anchors_per_image < 1:
            raise ValueError("anchors_per_image must be >= 1 when given")


class PseudoLabelGrid(NamedTuple):
    """Pseudo classes and confidences at embedding resolution, shape (B, h, w, d)."""

    classes: torch.Tensor
    confidence: torch.Tensor


class NegativeBank(NamedTuple):
    embeddings: torch.Tensor  # (K, E)
    classes: torch.Tensor  # (K,)
    confidences: torch.Tensor  # (K,), non-increasing
    indices: torch.Tensor  # (K,) linear voxel index in the source grid

    def __len__(self):
        return int(self.classes.numel())


def downsample_pseudo_labels(probs: torch.Tensor, stride: int) -> PseudoLabelGrid:
    """Average-pool a (B, C, H, W, D) probability map by ``stride`` then argmax/max."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    for axis, n in enumerate(probs.shape[2:]):
        if n % stride:
            raise ValueError(f"stride {stride} does not divide spatial axis {axis} (size {n})")
    probs = probs.detach()
    pooled = probs if stride == 1 else F.avg_pool3d(probs, stride)
    conf, cls = pooled.max(dim=1)
    return PseudoLabelGrid(cls, conf)


def sample_confident_negatives(u_neg: torch.Tensor, pl_neg: PseudoLabelGrid, anchor_class: int,
                               num_negatives: int) -> NegativeBank:
    """Top-``num_negatives`` most confident locations whose pseudo class differs from the anchor's.

    ``u_neg`` is one embedding map (E, h, w, d) and ``pl_neg`` its pseudo-label
    grid without batch axis (h, w, d). Ties keep ascending linear index.
    """
    if num_negatives < 1:
        raise ValueError("num_negatives must be >= 1")
    emb = u_neg.reshape(u_neg.shape[0], -1).t()
    cls = pl_neg.classes.reshape(-1)
    conf = pl_neg.confidence.reshape(-1)
    eligible = torch.nonzero(cls != anchor_class).squeeze(1)
    order = torch.sort(conf[eligible], descending=True, stable=True).indices
    keep = eligible[order[:num_negatives]]
    return NegativeBank(emb[keep], cls[keep], conf[keep], keep)


def _directional_terms(pos: torch.Tensor, a: torch.Tensor, negs: torch.Tensor, tau: float):
    # -log(e^{pos} / (e^{pos} + sum e^{neg})) with pos, neg already divided by tau
    neg_logits = a @ negs.t() / tau
    logits = torch.cat([pos.unsqueeze(1), neg_logits], dim=1)
    return torch.logsumexp(logits, dim=1) - pos


def bidirectional_contrastive_loss(u1: torch.Tensor, u2: torch.Tensor, u_neg: torch.Tensor,
                                   pl: PseudoLabelGrid, pl_neg: PseudoLabelGrid, tau: float,
                                   num_negatives: int, anchors_per_image: Optional[int] = None,
                                   detach_negatives: bool = True,
                                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean over anchors of L_c(psi1, psi2) + L_c(psi2, psi1).

    Positives are the co-located voxels of the two view embeddings (B, E, h,
    w, d). Image ``b`` draws negatives from ``u_neg[b]`` using its
    pseudo-label grid ``pl_neg``; anchor classes come from ``pl``. One bank is
    built per anchor class present in an image and shared by its anchors.
    Anchors without eligible negatives contribute zero but still count in the
    mean.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if u1.shape != u2.shape or u1.shape != u_neg.shape:
        raise ValueError(f"embedding maps misaligned: {tuple(u1.shape)}, {tuple(u2.shape)}, {tuple(u_neg.shape)}")
    grid = (u1.shape[0],) + tuple(u1.shape[2:])
    for g in (pl.classes, pl_neg.classes, pl.confidence, pl_neg.confidence):
        if tuple(g.shape) != grid:
            raise ValueError(f"pseudo-label grid {tuple(g.shape)} does not match embeddings {grid}")
    if detach_negatives:
        u_neg = u_neg.detach()
    u1 = F.normalize(u1, dim=1)
    u2 = F.normalize(u2, dim=1)
    u_neg = F.normalize(u_neg, dim=1)

    total = u1.new_zeros(())
    count = 0
    for b in range(u1.shape[0]):
        a1 = u1[b].reshape(u1.shape[1], -1).t()
        a2 = u2[b].reshape(u2.shape[1], -1).t()
        anchor_cls = pl.classes[b].reshape(-1)
        idx = torch.arange(a1.shape[0], device=u1.device)
        if anchors_per_image is not None and anchors_per_image < a1.shape[0]:
            idx = torch.randperm(a1.shape[0], generator=generator)[:anchors_per_image].sort().values
        count += idx.numel()
        neg_grid = PseudoLabelGrid(pl_neg.classes[b], pl_neg.confidence[b])
        for c in torch.unique(anchor_cls[idx]).tolist():
            sel = idx[anchor_cls[idx] == c]
            bank = sample_confident_negatives(u_neg[b], neg_grid, c, num_negatives)
            if len(bank) == 0:
                continue
            p1, p2 = a1[sel], a2[sel]
            pos = (p1 * p2).sum(1) / tau
            total = total + _directional_terms(pos, p1, bank.embeddings, tau).sum()
            total = total + _directional_terms(pos, p2, bank.embeddings, tau).sum()
    return total / max(count, 1)
