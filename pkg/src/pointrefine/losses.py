"""Training losses for the point refiner.

All score tensors hold sigmoid probabilities unless a name says "logits".
Scores are clamped to [eps, 1-eps] before any log.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-6


@dataclass
class LossWeights:
    alpha_ann: float = 0.5
    alpha_neg: float = 3.0
    gamma: float = 2.0


@dataclass
class BagScores:
    """Per-point and per-bag scores for a batch of MIL bags.

    cls/ins/over are (N, K) over the concatenated bag points; bag is (M, K);
    segments maps each point row to its bag index.
    """

    cls: torch.Tensor
    ins: torch.Tensor
    over: torch.Tensor
    bag: torch.Tensor
    segments: torch.Tensor


def focal_term(score: torch.Tensor, positive: bool, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise focal loss term; nonnegative for clamped scores."""
    s = score.clamp(EPS, 1.0 - EPS)
    if positive:
        return -((1.0 - s) ** gamma) * torch.log(s)
    return -(s ** gamma) * torch.log(1.0 - s)


def focal_loss(scores: torch.Tensor, onehot: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean over rows of the focal loss summed across categories."""
    per_entry = onehot * focal_term(scores, True, gamma) + (1.0 - onehot) * focal_term(
        scores, False, gamma
    )
    return per_entry.sum(dim=1).mean()


def segment_softmax(logits: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax over rows sharing a segment id, independently per column."""
    n, k = logits.shape
    idx = segments.unsqueeze(1).expand(n, k)
    seg_max = torch.full(
        (num_segments, k), -torch.inf, dtype=logits.dtype, device=logits.device
    ).scatter_reduce(0, idx, logits, reduce="amax", include_self=True)
    e = torch.exp(logits - seg_max[segments])
    denom = torch.zeros(
        (num_segments, k), dtype=logits.dtype, device=logits.device
    ).index_add(0, segments, e)
    return e / denom[segments]


def bag_scores(
    point_feats: torch.Tensor,
    segments: torch.Tensor,
    num_bags: int,
    heads,
) -> BagScores:
    """Score concatenated bag points and pool them into bag-level scores.

    cls = sigmoid of the classification head; ins = per-bag softmax of the
    instance head; over = cls * ins; bag = sum of over within each bag.
    """
    s_cls = torch.sigmoid(heads.fc_cls(point_feats))
    o_ins = heads.fc_ins(point_feats)
    s_ins = segment_softmax(o_ins, segments, num_bags)
    s_over = s_cls * s_ins
    k = s_over.shape[1]
    bag = torch.zeros(
        (num_bags, k), dtype=s_over.dtype, device=s_over.device
    ).index_add(0, segments, s_over)
    return BagScores(cls=s_cls, ins=s_ins, over=s_over, bag=bag, segments=segments)


def mil_loss(bag: torch.Tensor, onehot: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    return focal_loss(bag, onehot, gamma)


def annotation_loss(
    ann_scores: torch.Tensor, onehot: torch.Tensor, gamma: float = 2.0
) -> torch.Tensor:
    """Focal loss on the classification scores at the annotated points."""
    return focal_loss(ann_scores, onehot, gamma)


def negative_loss(
    grid_scores: torch.Tensor,
    neg_masks: torch.Tensor,
    num_objects: int,
    gamma: float = 2.0,
    per_point: bool = False,
) -> torch.Tensor:
    """Negative-part focal loss over per-category negative grid points.

    grid_scores is (h*w, K) sigmoid scores of the full grid; neg_masks is a
    (K, h*w) bool tensor. Normalized by the object count M; per_point
    switches to normalizing by the number of negative points instead.
    """
    total = grid_scores.sum() * 0.0
    count = 0
    for k in range(neg_masks.shape[0]):
        s = grid_scores[neg_masks[k], k]
        if s.numel():
            total = total + focal_term(s, False, gamma).sum()
            count += s.numel()
    denom = max(count, 1) if per_point else max(num_objects, 1)
    return total / denom


def variance_target_map(
    centers: torch.Tensor,
    sigmas: torch.Tensor,
    categories: torch.Tensor,
    map_extent: tuple[int, int],
    num_categories: int,
) -> torch.Tensor:
    """Per-category target maps peaking at the refined points.

    Each object contributes exp(-dist/sigma) of the plain Euclidean distance
    to its center; same-category maps combine by elementwise max.
    """
    h, w = map_extent
    dtype = centers.dtype
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    target = torch.zeros((h, w, num_categories), dtype=dtype)
    for j in range(centers.shape[0]):
        d = torch.sqrt((xs - centers[j, 0]) ** 2 + (ys - centers[j, 1]) ** 2)
        g = torch.exp(-d / sigmas[j])
        k = int(categories[j])
        target[:, :, k] = torch.maximum(target[:, :, k], g)
    return target


def variance_loss(var_scores: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Dense binary cross-entropy, summed over positions and categories."""
    s = var_scores.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(s) + (1.0 - target) * torch.log(1.0 - s)).sum()


def stage_refine_loss(
    features: torch.Tensor,
    heads,
    bag_points: torch.Tensor,
    segments: torch.Tensor,
    ann_points: torch.Tensor,
    onehot: torch.Tensor,
    neg_masks: torch.Tensor,
    weights: LossWeights = LossWeights(),
    neg_per_point: bool = False,
) -> dict[str, torch.Tensor]:
    """One refinement stage: MIL + weighted annotation and negative losses."""
    from .models import bilinear_features

    num_objects = onehot.shape[0]
    point_feats = bilinear_features(features, bag_points)
    scores = bag_scores(point_feats, segments, num_objects, heads)
    l_mil = mil_loss(scores.bag, onehot, weights.gamma)

    ann_feats = bilinear_features(features, ann_points)
    s_ann = torch.sigmoid(heads.fc_cls(ann_feats))
    l_ann = annotation_loss(s_ann, onehot, weights.gamma)

    h, w, d = features.shape
    grid_scores = torch.sigmoid(heads.fc_cls(features.reshape(h * w, d)))
    l_neg = negative_loss(grid_scores, neg_masks, num_objects, weights.gamma, neg_per_point)

    total = l_mil + weights.alpha_ann * l_ann + weights.alpha_neg * l_neg
    return {"total": total, "mil": l_mil, "ann": l_ann, "neg": l_neg}
