"""Semantic-point selection, sampling-region estimation, and the cascade.

A refinement stage scores the point bag of each object, keeps the points that
pass the selection constraints, and summarizes them into a refined center and
an adaptive radius for the next stage. Regions passed between stages carry no
gradient: they act as label assignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset
from .losses import (
    LossWeights,
    stage_refine_loss,
    variance_loss,
    variance_target_map,
)
from .models import PointRefiner, bilinear_features
from .sampling import GRID_GUARD, SamplingRegion, build_bag, make_region, negative_mask


@dataclass
class SemanticPointSet:
    """Selected bag points of one object with their category scores.

    The first row is always the annotated point itself (the selection seed);
    all remaining rows come from the object's sampling region.
    """

    object_id: int
    points: np.ndarray  # (N, 2) feature coordinates
    scores: np.ndarray  # (N,)


@dataclass
class RefineSettings:
    """Knobs shared by cascade training and inference."""

    r_init: int = 20
    u0: int = 8
    delta1: float = 0.1
    delta2: float = 0.5
    cascade_mode: str = "cascade2"  # single | cascade1 | cascade2
    use_var_loss: bool = True
    var_sigma: float = 0.0  # 0 -> per-object estimated radius
    sampling_shape: str = "circle"
    rect_aspect: float = 1.0
    neg_guard: float = GRID_GUARD
    neg_per_point: bool = False
    nearest_all_categories: bool = False
    weights: LossWeights = field(default_factory=LossWeights)


def weighted_center(points: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Score-weighted mean of a nonempty point set."""
    if len(points) == 0:
        raise ValueError("empty semantic point set")
    w = np.asarray(scores, dtype=np.float64)
    return (np.asarray(points, dtype=np.float64) * w[:, None]).sum(axis=0) / w.sum()


def estimate_region(sps: SemanticPointSet) -> SamplingRegion:
    """Refined center plus a radius from the points' minimum bounding box.

    The radius is the square root of the bounding-box area, floored with a
    minimum of 1 so degenerate (single or collinear) sets stay usable.
    """
    center = weighted_center(sps.points, sps.scores)
    x1, y1 = sps.points.min(axis=0)
    x2, y2 = sps.points.max(axis=0)
    radius = np.sqrt((x2 - x1) * (y2 - y1))
    return make_region(sps.object_id, (center[0], center[1]), radius)


def select_semantic_points(
    features: torch.Tensor,
    heads,
    ann_points: np.ndarray,
    categories: np.ndarray,
    regions: list[SamplingRegion],
    settings: RefineSettings,
) -> list[SemanticPointSet]:
    """Keep bag points that look like their object, one set per object.

    A bag point p of object j (category k) survives when:
      I.   its score s_p on k exceeds delta1 and delta2 * score of the
           annotated point;
      II.  k is the argmax of p's scores over all categories;
      III. the nearest annotated point of category k is a_j itself (set
           nearest_all_categories to compare against every annotation).
    The annotated point is always included with its own score.
    """
    h, w, _ = features.shape
    m = len(regions)
    out: list[SemanticPointSet] = []
    with torch.no_grad():
        ann_t = torch.as_tensor(ann_points, dtype=features.dtype)
        s_ann = torch.sigmoid(heads.fc_cls(bilinear_features(features, ann_t))).numpy()
        for j in range(m):
            k = int(categories[j])
            bag = build_bag(
                regions[j],
                settings.u0,
                (h, w),
                category=k,
                shape=settings.sampling_shape,
                aspect=settings.rect_aspect,
            )
            pts_t = torch.as_tensor(bag.points, dtype=features.dtype)
            scores = torch.sigmoid(heads.fc_cls(bilinear_features(features, pts_t))).numpy()
            s_own = scores[:, k]
            a_score = float(s_ann[j, k])
            keep = (s_own > settings.delta1) & (s_own > settings.delta2 * a_score)
            keep &= scores.argmax(axis=1) == k
            if settings.nearest_all_categories:
                rivals = np.arange(m)
            else:
                rivals = np.nonzero(np.asarray(categories) == k)[0]
            if len(rivals) > 1:
                d = np.hypot(
                    bag.points[:, 0][:, None] - ann_points[rivals, 0][None, :],
                    bag.points[:, 1][:, None] - ann_points[rivals, 1][None, :],
                )
                own_col = int(np.nonzero(rivals == j)[0][0])
                keep &= d[:, own_col] <= d.min(axis=1) + 1e-9
            out.append(
                SemanticPointSet(
                    object_id=regions[j].object_id,
                    points=np.concatenate([ann_points[j : j + 1], bag.points[keep]]),
                    scores=np.concatenate([[a_score], s_own[keep]]),
                )
            )
    return out


def _next_regions(
    sets: list[SemanticPointSet],
    prev: list[SamplingRegion],
    settings: RefineSettings,
) -> list[SamplingRegion]:
    regions = [estimate_region(s) for s in sets]
    if settings.cascade_mode == "cascade1":
        # dynamic center, frozen radius
        regions = [
            SamplingRegion(r.object_id, r.center, p.radius)
            for r, p in zip(regions, prev)
        ]
    return regions


def _initial_regions(
    ann_points: np.ndarray, object_ids: list[int], settings: RefineSettings
) -> list[SamplingRegion]:
    return [
        make_region(oid, (p[0], p[1]), settings.r_init)
        for oid, p in zip(object_ids, ann_points)
    ]


def _stage_inputs(
    regions: list[SamplingRegion],
    categories: np.ndarray,
    extent: tuple[int, int],
    num_categories: int,
    settings: RefineSettings,
    dtype: torch.dtype,
):
    """Bags, segment ids and per-category negative masks for one stage."""
    bags = [
        build_bag(
            reg,
            settings.u0,
            extent,
            category=int(categories[j]),
            shape=settings.sampling_shape,
            aspect=settings.rect_aspect,
        )
        for j, reg in enumerate(regions)
    ]
    pts = np.concatenate([b.points for b in bags])
    segments = np.concatenate(
        [np.full(len(b.points), j, dtype=np.int64) for j, b in enumerate(bags)]
    )
    neg = np.stack(
        [
            negative_mask(
                [r for r, c in zip(regions, categories) if int(c) == k],
                extent,
                settings.neg_guard,
            )
            for k in range(num_categories)
        ]
    )
    return (
        torch.as_tensor(pts, dtype=dtype),
        torch.as_tensor(segments),
        torch.as_tensor(neg),
    )


def single_stage_loss(
    features: torch.Tensor,
    model: PointRefiner,
    ann_points: np.ndarray,
    categories: np.ndarray,
    object_ids: list[int],
    settings: RefineSettings,
) -> dict[str, torch.Tensor]:
    """The original one-stage refinement loss, sampled at the annotations."""
    h, w, _ = features.shape
    kc = model.num_categories
    onehot = torch.zeros((len(object_ids), kc), dtype=features.dtype)
    onehot[torch.arange(len(object_ids)), torch.as_tensor(np.asarray(categories, dtype=np.int64))] = 1.0
    regions = _initial_regions(ann_points, object_ids, settings)
    bag_pts, segments, neg = _stage_inputs(
        regions, categories, (h, w), kc, settings, features.dtype
    )
    return stage_refine_loss(
        features,
        model.heads[0],
        bag_pts,
        segments,
        torch.as_tensor(ann_points, dtype=features.dtype),
        onehot,
        neg,
        settings.weights,
        settings.neg_per_point,
    )


def refine_image_single(
    features: torch.Tensor,
    model: PointRefiner,
    ann_points: np.ndarray,
    categories: np.ndarray,
    object_ids: list[int],
    settings: RefineSettings,
) -> np.ndarray:
    """One-stage refinement: select semantic points once, return the centers."""
    regions = _initial_regions(ann_points, object_ids, settings)
    with torch.no_grad():
        sets = select_semantic_points(
            features, model.heads[0], ann_points, categories, regions, settings
        )
        regions = _next_regions(sets, regions, settings)
    return np.array([r.center for r in regions], dtype=np.float64)


def cascade_loss(
    features: torch.Tensor,
    model: PointRefiner,
    ann_points: np.ndarray,
    categories: np.ndarray,
    object_ids: list[int],
    settings: RefineSettings,
) -> dict[str, torch.Tensor]:
    """Summed stage losses, plus variance regularization on the last stage.

    Stage 1 samples around the annotated points with the initial radius;
    each later stage uses regions estimated from the previous stage's
    semantic points without gradient flow. The variance term only applies
    when there is more than one stage, supervised by the region centers
    entering the final stage.
    """
    num_stages = model.num_stages
    if num_stages < 1:
        raise ValueError("cascade needs at least one stage")
    h, w, _ = features.shape
    kc = model.num_categories
    onehot = torch.zeros((len(object_ids), kc), dtype=features.dtype)
    onehot[torch.arange(len(object_ids)), torch.as_tensor(np.asarray(categories, dtype=np.int64))] = 1.0
    ann_t = torch.as_tensor(ann_points, dtype=features.dtype)

    regions = _initial_regions(ann_points, object_ids, settings)
    losses: dict[str, torch.Tensor] = {}
    total = features.sum() * 0.0
    for ks in range(num_stages):
        bag_pts, segments, neg = _stage_inputs(
            regions, categories, (h, w), kc, settings, features.dtype
        )
        stage = stage_refine_loss(
            features,
            model.heads[ks],
            bag_pts,
            segments,
            ann_t,
            onehot,
            neg,
            settings.weights,
            settings.neg_per_point,
        )
        total = total + stage["total"]
        losses[f"stage{ks + 1}"] = stage["total"].detach()
        if ks == num_stages - 1 and num_stages != 1 and settings.use_var_loss:
            centers = torch.tensor(
                [r.center for r in regions], dtype=features.dtype
            )
            if settings.var_sigma > 0:
                sigmas = torch.full((len(regions),), settings.var_sigma, dtype=features.dtype)
            else:
                sigmas = torch.tensor(
                    [float(r.radius) for r in regions], dtype=features.dtype
                )
            target = variance_target_map(
                centers, sigmas, torch.as_tensor(np.asarray(categories)), (h, w), kc
            )
            logits = model.var_head(features.permute(2, 0, 1).unsqueeze(0))[0]
            l_var = variance_loss(torch.sigmoid(logits.permute(1, 2, 0)), target)
            total = total + l_var
            losses["var"] = l_var.detach()
        if ks < num_stages - 1:
            sets = select_semantic_points(
                features.detach(), model.heads[ks], ann_points, categories, regions, settings
            )
            regions = _next_regions(sets, regions, settings)
    losses["total"] = total
    return losses


def refine_image(
    features: torch.Tensor,
    model: PointRefiner,
    ann_points: np.ndarray,
    categories: np.ndarray,
    object_ids: list[int],
    settings: RefineSettings,
) -> tuple[np.ndarray, list[dict]]:
    """Run the full cascade and return refined points in feature coords.

    Also returns a per-object trace of the visited stage centers and radii
    for provenance. The refined point of each object is the center of the
    region estimated after the final stage.
    """
    regions = _initial_regions(ann_points, object_ids, settings)
    traces = [
        {"centers": [list(map(float, r.center))], "radii": [r.radius]} for r in regions
    ]
    with torch.no_grad():
        for ks in range(model.num_stages):
            sets = select_semantic_points(
                features, model.heads[ks], ann_points, categories, regions, settings
            )
            regions = _next_regions(sets, regions, settings)
            for t, r in zip(traces, regions):
                t["centers"].append(list(map(float, r.center)))
                t["radii"].append(r.radius)
    refined = np.array([r.center for r in regions], dtype=np.float64)
    return refined, traces


def image_annotation_arrays(
    rec, stride: int, extent: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Coarse points of one record as feature-coord arrays.

    Image coordinates divide by the stride and clamp to the map so edge
    annotations stay resolvable.
    """
    h, w = extent
    pts, cats, ids = [], [], []
    for cp in rec.coarse_points:
        x = min(max(cp.position[0] / stride, 0.0), w - 1)
        y = min(max(cp.position[1] / stride, 0.0), h - 1)
        pts.append((x, y))
        cats.append(cp.category)
        ids.append(cp.object_id)
    return (
        np.array(pts, dtype=np.float64).reshape(-1, 2),
        np.array(cats, dtype=np.int64),
        ids,
    )


def train_refiner(
    dataset: Dataset,
    images_dir,
    settings: RefineSettings,
    num_stages: int,
    stride: int = 8,
    channels: int = 32,
    epochs: int = 8,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    log: list | None = None,
) -> PointRefiner:
    """Train a refiner on a point-annotated dataset; deterministic per seed."""
    from .data import load_image
    from .models import images_to_tensor

    torch.manual_seed(seed)
    model = PointRefiner(
        dataset.num_categories, num_stages=num_stages, stride=stride, channels=channels
    )
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
            # group identically sized images so they share one forward pass
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
                feats = model.features(
                    images_to_tensor([arrays[r.image_id] for r in group])
                )
                for bi, rec in enumerate(group):
                    pts, cats, ids = image_annotation_arrays(
                        rec, stride, (feats.shape[1], feats.shape[2])
                    )
                    losses = cascade_loss(feats[bi], model, pts, cats, ids, settings)
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


def refine_dataset(
    model: PointRefiner,
    dataset: Dataset,
    images_dir,
    settings: RefineSettings,
) -> tuple[Dataset, dict]:
    """Refine every coarse point; returns a dataset copy and per-object traces.

    Refined positions are reported in image coordinates (feature coordinates
    times the stride).
    """
    import copy

    from .data import load_image
    from .models import images_to_tensor

    refined_ds = copy.deepcopy(dataset)
    traces: dict = {}
    model.eval()
    for rec in refined_ds.images:
        if not rec.coarse_points:
            continue
        img = load_image(images_dir, rec)
        with torch.no_grad():
            feats = model.features(images_to_tensor([img]))[0]
        pts, cats, ids = image_annotation_arrays(
            rec, model.stride, (feats.shape[0], feats.shape[1])
        )
        refined, tr = refine_image(feats, model, pts, cats, ids, settings)
        refined_img = refined * model.stride
        for cp, pos in zip(rec.coarse_points, refined_img):
            cp.position = (float(pos[0]), float(pos[1]))
        for oid, t in zip(ids, tr):
            traces[(rec.image_id, oid)] = t
    return refined_ds, traces


def iterative_refine(
    dataset: Dataset,
    images_dir,
    settings: RefineSettings,
    iterations: int,
    train_kwargs: dict,
) -> tuple[Dataset, list[float]]:
    """Train-refine-retrain loop with a single-stage refiner.

    Each iteration trains a fresh refiner on the current points and replaces
    them with its refinement. Returns the final dataset and the mean point
    displacement per iteration. Zero iterations return the input unchanged.
    """
    import copy

    current = copy.deepcopy(dataset)
    displacement: list[float] = []
    for it in range(iterations):
        model = train_refiner(
            current, images_dir, settings, num_stages=1, **train_kwargs
        )
        refined, _ = refine_dataset(model, current, images_dir, settings)
        moves = [
            float(np.hypot(a.position[0] - b.position[0], a.position[1] - b.position[1]))
            for old, new in zip(current.images, refined.images)
            for a, b in zip(old.coarse_points, new.coarse_points)
        ]
        displacement.append(float(np.mean(moves)) if moves else 0.0)
        current = refined
    return current, displacement
