"""Static figure emission: score heatmaps, refined points, predictions."""
from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .config import ExperimentConfig
from .data import load_dataset, load_image
from .models import images_to_tensor, load_refiner


def _select_records(dataset, image_ids):
    by_id = {rec.image_id: rec for rec in dataset.images}
    if image_ids is None:
        return list(dataset.images)
    records = []
    missing = []
    for i in image_ids:
        if i in by_id:
            records.append(by_id[i])
        else:
            missing.append(i)
    if missing:
        warnings.warn(f"unknown image ids skipped: {missing}")
    return records


def _heatmaps(cfg: ExperimentConfig, records, paths, out: Path) -> list[Path]:
    model, meta = load_refiner(paths["refiner"])
    written = []
    for rec in records:
        img = load_image(paths["data"], rec)
        with torch.no_grad():
            feats = model.features(images_to_tensor([img]))[0]
            h, w, d = feats.shape
            flat = feats.reshape(h * w, d)
            for ks, heads in enumerate(model.heads):
                scores = torch.sigmoid(heads.fc_cls(flat)).reshape(h, w, -1).numpy()
                for k, name in enumerate(meta["categories"]):
                    fig, ax = plt.subplots(figsize=(4, 4))
                    ax.imshow(img, extent=(0, rec.width, rec.height, 0))
                    ax.imshow(
                        scores[:, :, k],
                        alpha=0.6,
                        cmap="jet",
                        vmin=0,
                        vmax=1,
                        extent=(0, rec.width, rec.height, 0),
                    )
                    ax.set_title(f"image {rec.image_id} stage {ks + 1} {name}")
                    ax.axis("off")
                    path = out / f"img{rec.image_id:05d}_stage{ks + 1}_{name}_heatmap.png"
                    fig.savefig(path, bbox_inches="tight", dpi=120)
                    plt.close(fig)
                    written.append(path)
    return written


def _refined_points(cfg: ExperimentConfig, records, paths, out: Path) -> list[Path]:
    from .pipeline import settings_from_config
    from .refine import (
        _initial_regions,
        _next_regions,
        image_annotation_arrays,
        select_semantic_points,
    )

    model, _ = load_refiner(paths["refiner"])
    refined_ds = load_dataset(paths["refined"], "internal-json")
    refined_by_id = {rec.image_id: rec for rec in refined_ds.images}
    settings = settings_from_config(cfg)
    written = []
    for rec in records:
        img = load_image(paths["data"], rec)
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(img, extent=(0, rec.width, rec.height, 0))
        with torch.no_grad():
            feats = model.features(images_to_tensor([img]))[0]
        pts, cats, ids = image_annotation_arrays(
            rec, model.stride, (feats.shape[0], feats.shape[1])
        )
        if len(ids):
            regions = _initial_regions(pts, ids, settings)
            sets = None
            for ks in range(model.num_stages):
                sets = select_semantic_points(
                    feats, model.heads[ks], pts, cats, regions, settings
                )
                regions = _next_regions(sets, regions, settings)
            for s in sets:
                semantic = s.points * model.stride
                ax.scatter(semantic[:, 0], semantic[:, 1], s=6, c="red", alpha=0.6)
                x0, y0 = semantic.min(axis=0)
                x1, y1 = semantic.max(axis=0)
                ax.add_patch(
                    plt.Rectangle(
                        (x0, y0), x1 - x0, y1 - y0, fill=False, ec="red", lw=0.8
                    )
                )
        ann = np.array([cp.position for cp in rec.coarse_points]).reshape(-1, 2)
        if len(ann):
            ax.scatter(ann[:, 0], ann[:, 1], s=30, c="lime", marker="o", label="annotated")
        ref_rec = refined_by_id.get(rec.image_id)
        if ref_rec is not None and ref_rec.coarse_points:
            ref = np.array([cp.position for cp in ref_rec.coarse_points])
            ax.scatter(ref[:, 0], ref[:, 1], s=30, c="yellow", marker="x", label="refined")
        ax.legend(loc="lower right", fontsize=7)
        ax.axis("off")
        path = out / f"img{rec.image_id:05d}_points.png"
        fig.savefig(path, bbox_inches="tight", dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def _predictions(cfg: ExperimentConfig, records, paths, out: Path) -> list[Path]:
    import json

    with open(paths["predictions"]) as f:
        preds = json.load(f)
    written = []
    for rec in records:
        img = load_image(paths["data"], rec)
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(img, extent=(0, rec.width, rec.height, 0))
        for obj in rec.objects:
            xc, yc, w, h = obj.box
            ax.add_patch(
                plt.Rectangle(
                    (xc - w / 2, yc - h / 2), w, h, fill=False, ec="white", ls="--", lw=0.8
                )
            )
        for p in preds.get(str(rec.image_id), []):
            ax.scatter([p["x"]], [p["y"]], s=25, c="cyan", marker="+")
        ax.axis("off")
        path = out / f"img{rec.image_id:05d}_pred.png"
        fig.savefig(path, bbox_inches="tight", dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def visualize(
    cfg: ExperimentConfig, kind: str, image_ids: list[int] | None = None
) -> list[Path]:
    """Render one artifact kind for the given image ids (all when None)."""
    from .pipeline import artifact_paths

    paths = artifact_paths(cfg)
    out = paths["viz"]
    out.mkdir(parents=True, exist_ok=True)
    if kind == "predictions":
        dataset = load_dataset(paths["test_gt"], "internal-json")
    else:
        dataset = load_dataset(paths["points"], "internal-json")
    records = _select_records(dataset, image_ids)
    if kind == "heatmaps":
        return _heatmaps(cfg, records, paths, out)
    if kind == "refined-points":
        return _refined_points(cfg, records, paths, out)
    if kind == "predictions":
        return _predictions(cfg, records, paths, out)
    raise ValueError(f"unknown visualization kind {kind!r}")
