"""Multi-class point localizer: dense proposals, top-k assignment, point NMS.

One proposal per feature cell at the chosen stride. Each ground-truth point
claims its k nearest anchors as positives; classification uses focal loss and
the offsets use smooth-L1 in pixel units.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .losses import focal_term
from .models import ConvFeatureExtractor


@dataclass
class PointProposal:
    anchor: tuple[float, float]  # feature-cell center, image px
    offset: tuple[float, float]  # predicted displacement, px
    scores: np.ndarray  # (K,) sigmoid scores


@dataclass
class LocalizedObject:
    position: tuple[float, float]
    category: int
    confidence: float


class PointLocalizer(nn.Module):
    """Extractor plus 1x1 classification and offset-regression heads."""

    def __init__(self, num_categories: int, stride: int = 8, channels: int = 32):
        super().__init__()
        self.num_categories = num_categories
        self.extractor = ConvFeatureExtractor(stride=stride, channels=channels)
        self.cls_head = nn.Conv2d(channels, num_categories, 1)
        self.reg_head = nn.Conv2d(channels, 2, 1)

    @property
    def stride(self) -> int:
        return self.extractor.stride

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.extractor(images)
        return self.cls_head(feats), self.reg_head(feats)


def anchor_grid(h: int, w: int, stride: int) -> np.ndarray:
    """(h*w, 2) anchor positions at feature-cell centers, in image pixels."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack(
        [(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], axis=1
    ).astype(np.float64)


def assign_targets(
    anchors: np.ndarray,
    gt_points: np.ndarray,
    gt_ids: np.ndarray,
    k: int,
) -> np.ndarray:
    """Top-k positive assignment; returns per-anchor gt row index or -1.

    Every ground truth claims its k nearest anchors (Euclidean, image px).
    An anchor claimed by several ground truths goes to the nearest one;
    exact distance ties go to the lower object id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    num_anchors = len(anchors)
    assign = np.full(num_anchors, -1, dtype=np.int64)
    if len(gt_points) == 0:
        return assign
    if num_anchors < k:
        warnings.warn(f"only {num_anchors} anchors for top-{k} assignment")
    d = np.hypot(
        anchors[:, 0][:, None] - gt_points[None, :, 0],
        anchors[:, 1][:, None] - gt_points[None, :, 1],
    )
    kk = min(k, num_anchors)
    gt_ids = np.asarray(gt_ids, dtype=np.int64)
    best = np.full(num_anchors, np.inf)
    best_id = np.full(num_anchors, np.iinfo(np.int64).max, dtype=np.int64)
    for g in range(len(gt_points)):
        nearest = np.argpartition(d[:, g], kk - 1)[:kk]
        for a in nearest:
            da = d[a, g]
            if da < best[a] or (da == best[a] and gt_ids[g] < best_id[a]):
                best[a] = da
                best_id[a] = gt_ids[g]
                assign[a] = g
    return assign


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def localizer_loss(
    cls_logits: torch.Tensor,
    pred_offsets: torch.Tensor,
    assign: np.ndarray,
    gt_points: np.ndarray,
    gt_categories: np.ndarray,
    anchors: np.ndarray,
    gamma: float = 2.0,
    beta: float = 1.0,
    lambda_reg: float = 1.0,
) -> dict[str, torch.Tensor]:
    """Focal classification over all proposals plus smooth-L1 on positives.

    The classification sum is normalized by the positive count; the
    regression term is the mean smooth-L1 over positive offset coordinates.
    """
    num_anchors, kc = cls_logits.shape
    scores = torch.sigmoid(cls_logits)
    onehot = torch.zeros_like(scores)
    pos = np.nonzero(assign >= 0)[0]
    if len(pos):
        cats = gt_categories[assign[pos]]
        onehot[torch.as_tensor(pos), torch.as_tensor(cats)] = 1.0
    cls = (
        onehot * focal_term(scores, True, gamma)
        + (1.0 - onehot) * focal_term(scores, False, gamma)
    ).sum() / max(len(pos), 1)
    if len(pos):
        target = torch.as_tensor(
            gt_points[assign[pos]] - anchors[pos], dtype=pred_offsets.dtype
        )
        reg = smooth_l1(pred_offsets[torch.as_tensor(pos)] - target, beta).mean()
    else:
        reg = pred_offsets.sum() * 0.0
    return {"total": cls + lambda_reg * reg, "cls": cls, "reg": reg}


def _pseudo_box_iou(points: np.ndarray, i: int, box: float) -> np.ndarray:
    """IoU of fixed square pseudo boxes centered on the points vs point i."""
    dx = np.abs(points[:, 0] - points[i, 0])
    dy = np.abs(points[:, 1] - points[i, 1])
    inter = np.maximum(0.0, box - dx) * np.maximum(0.0, box - dy)
    return inter / (2 * box * box - inter)


def point_nms(
    points: np.ndarray,
    scores: np.ndarray,
    pseudo_box_size: float,
    iou_threshold: float,
) -> list[int]:
    """Greedy suppression of points as fixed-size square boxes.

    Returns surviving indices in descending score order (stable on ties).
    """
    if pseudo_box_size <= 0:
        raise ValueError("pseudo_box_size must be positive")
    order = sorted(range(len(points)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    alive = np.ones(len(points), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        iou = _pseudo_box_iou(points, i, pseudo_box_size)
        alive &= iou <= iou_threshold
        alive[i] = False
    return keep


def propose(model: PointLocalizer, image: np.ndarray) -> list[PointProposal]:
    """Dense proposals for one float HWC image in [0, 1]."""
    from .models import images_to_tensor

    model.eval()
    with torch.no_grad():
        logits, offsets = model(images_to_tensor([image]))
    kc, h, w = logits.shape[1:]
    scores = torch.sigmoid(logits)[0].permute(1, 2, 0).reshape(-1, kc).numpy()
    off = offsets[0].permute(1, 2, 0).reshape(-1, 2).numpy()
    anchors = anchor_grid(h, w, model.stride)
    return [
        PointProposal(anchor=tuple(anchors[i]), offset=tuple(off[i]), scores=scores[i])
        for i in range(len(anchors))
    ]


def predict_image(
    model: PointLocalizer,
    image: np.ndarray,
    score_threshold: float = 0.05,
    nms_box: float = 16.0,
    nms_iou: float = 0.5,
) -> list[LocalizedObject]:
    """Thresholded, NMS-filtered localizations for one image."""
    height, width = image.shape[:2]
    proposals = propose(model, image)
    anchors = np.array([p.anchor for p in proposals])
    offsets = np.array([p.offset for p in proposals])
    scores = np.array([p.scores for p in proposals])
    pts = anchors + offsets
    pts[:, 0] = pts[:, 0].clip(0, width - 1)
    pts[:, 1] = pts[:, 1].clip(0, height - 1)
    out: list[LocalizedObject] = []
    for k in range(scores.shape[1]):
        cand = np.nonzero(scores[:, k] > score_threshold)[0]
        if len(cand) == 0:
            continue
        keep = point_nms(pts[cand], scores[cand, k], nms_box, nms_iou)
        out.extend(
            LocalizedObject(
                position=(float(pts[cand[i], 0]), float(pts[cand[i], 1])),
                category=k,
                confidence=float(scores[cand[i], k]),
            )
            for i in keep
        )
    out.sort(key=lambda o: -o.confidence)
    return out


def train_localizer(
    dataset,
    images_dir,
    stride: int = 8,
    channels: int = 32,
    top_k: int = 4,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 8,
    lambda_reg: float = 1.0,
    gamma: float = 2.0,
    seed: int = 0,
    log: list | None = None,
) -> PointLocalizer:
    """Train a localizer on the dataset's (coarse or refined) points."""
    from .data import load_image
    from .models import images_to_tensor

    torch.manual_seed(seed)
    model = PointLocalizer(dataset.num_categories, stride=stride, channels=channels)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    records = [r for r in dataset.images if r.coarse_points]
    arrays = {r.image_id: load_image(images_dir, r) for r in records}
    for epoch in range(epochs):
        order = rng.permutation(len(records))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = [records[i] for i in order[start : start + batch_size]]
            batch = sorted(batch, key=lambda r: (r.height, r.width, r.image_id))
            opt.zero_grad()
            total = torch.zeros(())
            i = 0
            while i < len(batch):
                j = i
                while (
                    j < len(batch)
                    and batch[j].height == batch[i].height
                    and batch[j].width == batch[i].width
                ):
                    j += 1
                group = batch[i:j]
                logits, offsets = model(
                    images_to_tensor([arrays[r.image_id] for r in group])
                )
                h, w = logits.shape[2:]
                anchors = anchor_grid(h, w, stride)
                for bi, rec in enumerate(group):
                    gt = np.array([cp.position for cp in rec.coarse_points])
                    cats = np.array([cp.category for cp in rec.coarse_points])
                    ids = np.array([cp.object_id for cp in rec.coarse_points])
                    assign = assign_targets(anchors, gt, ids, top_k)
                    kc = logits.shape[1]
                    losses = localizer_loss(
                        logits[bi].permute(1, 2, 0).reshape(-1, kc),
                        offsets[bi].permute(1, 2, 0).reshape(-1, 2),
                        assign,
                        gt,
                        cats,
                        anchors,
                        gamma=gamma,
                        lambda_reg=lambda_reg,
                    )
                    total = total + losses["total"]
                i = j
            total = total / len(batch)
            total.backward()
            opt.step()
            epoch_loss += float(total.detach())
        if log is not None:
            log.append(epoch_loss / max(1, (len(records) + batch_size - 1) // batch_size))
    model.eval()
    return model


def save_localizer(
    model: PointLocalizer, path: str | Path, categories: list[str], config_hash: str = ""
) -> None:
    payload = {
        "kind": "localizer",
        "state_dict": model.state_dict(),
        "categories": list(categories),
        "stride": model.stride,
        "channels": model.extractor.channels,
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_localizer(path: str | Path) -> tuple[PointLocalizer, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "localizer":
        raise ValueError(f"{path} is not a localizer checkpoint")
    model = PointLocalizer(
        num_categories=len(payload["categories"]),
        stride=payload["stride"],
        channels=payload["channels"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
