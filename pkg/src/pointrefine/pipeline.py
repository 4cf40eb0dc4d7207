"""End-to-end experiment driver: synth -> points -> refine -> localize -> eval.

Each stage reads and writes file artifacts, so stages can be re-run
individually and a pipeline run equals running the stages one by one.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, config_hash
from .data import Dataset, generate_dataset_points, load_dataset, save_dataset
from .localizer import (
    load_localizer,
    predict_image,
    save_localizer,
    train_localizer,
)
from .losses import LossWeights
from .models import load_refiner, save_refiner
from .refine import RefineSettings, iterative_refine, refine_dataset, train_refiner


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    config_hash: str
    version: str
    artifacts: dict[str, str] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=2)


def settings_from_config(cfg: ExperimentConfig) -> RefineSettings:
    return RefineSettings(
        r_init=cfg.r_init,
        u0=cfg.u0,
        delta1=cfg.delta1,
        delta2=cfg.delta2,
        cascade_mode="cascade2" if cfg.cascade_mode == "iterative" else cfg.cascade_mode,
        use_var_loss=cfg.use_var_loss,
        var_sigma=cfg.var_sigma,
        sampling_shape=cfg.sampling_shape,
        rect_aspect=cfg.rect_aspect,
        neg_per_point=cfg.neg_per_point,
        nearest_all_categories=cfg.nearest_all_categories,
        weights=LossWeights(cfg.alpha_ann, cfg.alpha_neg, cfg.gamma),
    )


def artifact_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    data = Path(cfg.dataset_dir) if cfg.dataset_dir else out / "data"
    return {
        "data": data,
        "train_gt": data / "train.json",
        "test_gt": data / "test.json",
        "points": out / "points_train.json",
        "refiner": out / "refiner.pt",
        "refined": out / "refined_train.json",
        "localizer": out / "localizer.pt",
        "predictions": out / "predictions.json",
        "metrics": out / "metrics.json",
        "metrics_txt": out / "metrics.txt",
        "manifest": out / "manifest.json",
        "viz": out / "viz",
    }


def stage_synth(cfg: ExperimentConfig) -> dict[str, Path]:
    from .synthetic import synth_dataset

    paths = artifact_paths(cfg)
    common = dict(
        num_categories=cfg.synth_categories,
        size_range=(cfg.synth_min_size, cfg.synth_max_size),
        clutter=cfg.synth_clutter,
        image_size=cfg.synth_image_size,
        max_objects=cfg.synth_max_objects,
    )
    synth_dataset(
        paths["data"], cfg.synth_train_images, seed=cfg.seed, prefix="train", **common
    )
    synth_dataset(
        paths["data"],
        cfg.synth_test_images,
        seed=cfg.seed + 1_000_003,
        prefix="test",
        **common,
    )
    return {"train_gt": paths["train_gt"], "test_gt": paths["test_gt"]}


def stage_gen_points(cfg: ExperimentConfig) -> dict[str, Path]:
    paths = artifact_paths(cfg)
    dataset = load_dataset(paths["train_gt"], "internal-json")
    generate_dataset_points(dataset, seed=cfg.seed, sigma=cfg.point_sigma)
    save_dataset(dataset, paths["points"])
    return {"points": paths["points"]}


def _load_points_dataset(cfg: ExperimentConfig) -> Dataset:
    paths = artifact_paths(cfg)
    return load_dataset(paths["points"], "internal-json")


def stage_train_refiner(cfg: ExperimentConfig) -> dict[str, Path]:
    paths = artifact_paths(cfg)
    dataset = _load_points_dataset(cfg)
    settings = settings_from_config(cfg)
    num_stages = 1 if cfg.cascade_mode in ("single", "iterative") else cfg.stages
    model = train_refiner(
        dataset,
        paths["data"],
        settings,
        num_stages=num_stages,
        stride=cfg.stride,
        channels=cfg.feat_channels,
        epochs=cfg.refiner_epochs,
        lr=cfg.refiner_lr,
        batch_size=cfg.refiner_batch,
        seed=cfg.seed,
    )
    save_refiner(model, paths["refiner"], dataset.categories, config_hash(cfg))
    return {"refiner": paths["refiner"]}


def stage_refine(cfg: ExperimentConfig) -> dict[str, Path]:
    paths = artifact_paths(cfg)
    dataset = _load_points_dataset(cfg)
    settings = settings_from_config(cfg)
    if cfg.cascade_mode == "iterative":
        refined, displacement = iterative_refine(
            dataset,
            paths["data"],
            settings,
            iterations=cfg.refine_iterations,
            train_kwargs=dict(
                stride=cfg.stride,
                channels=cfg.feat_channels,
                epochs=cfg.refiner_epochs,
                lr=cfg.refiner_lr,
                batch_size=cfg.refiner_batch,
                seed=cfg.seed,
            ),
        )
        traces: dict = {}
        info = {
            "mode": "iterative",
            "iterations": cfg.refine_iterations,
            "mean_displacement": displacement,
        }
    else:
        model, _ = load_refiner(paths["refiner"])
        refined, traces = refine_dataset(model, dataset, paths["data"], settings)
        info = {
            "mode": cfg.cascade_mode,
            "stages": model.num_stages,
            "r_init": cfg.r_init,
        }
    extras = {key: {"refine_trace": t} for key, t in traces.items()}
    save_dataset(
        refined,
        paths["refined"],
        annotation_extras=extras,
        top_level={"refine_info": info},
    )
    return {"refined": paths["refined"]}


def stage_train_localizer(cfg: ExperimentConfig) -> dict[str, Path]:
    paths = artifact_paths(cfg)
    source = paths["points"] if cfg.skip_refine else paths["refined"]
    dataset = load_dataset(source, "internal-json")
    model = train_localizer(
        dataset,
        paths["data"],
        stride=cfg.stride,
        channels=cfg.feat_channels,
        top_k=cfg.localizer_topk,
        epochs=cfg.localizer_epochs,
        lr=cfg.localizer_lr,
        batch_size=cfg.localizer_batch,
        lambda_reg=cfg.lambda_reg,
        gamma=cfg.gamma,
        seed=cfg.seed,
    )
    save_localizer(model, paths["localizer"], dataset.categories, config_hash(cfg))
    return {"localizer": paths["localizer"]}


def stage_evaluate(cfg: ExperimentConfig) -> dict[str, Path]:
    from .data import load_image
    from .evaluation import format_metrics_table, map_report

    paths = artifact_paths(cfg)
    dataset = load_dataset(paths["test_gt"], "internal-json")
    model, _ = load_localizer(paths["localizer"])
    predictions: dict[int, list[dict]] = {}
    for rec in dataset.images:
        img = load_image(paths["data"], rec)
        objs = predict_image(
            model,
            img,
            score_threshold=cfg.score_threshold,
            nms_box=cfg.nms_box,
            nms_iou=cfg.nms_iou,
        )
        predictions[rec.image_id] = [
            {"category": o.category, "x": o.position[0], "y": o.position[1], "score": o.confidence}
            for o in objs
        ]
    with open(paths["predictions"], "w") as f:
        json.dump({str(k): v for k, v in predictions.items()}, f)
    report = map_report(predictions, dataset, tuple(cfg.taus))
    with open(paths["metrics"], "w") as f:
        json.dump(report, f, indent=2)
    paths["metrics_txt"].write_text(format_metrics_table(report) + "\n")
    return {
        "predictions": paths["predictions"],
        "metrics": paths["metrics"],
        "metrics_txt": paths["metrics_txt"],
    }


def stage_visualize(
    cfg: ExperimentConfig, kind: str = "refined-points", image_ids: list[int] | None = None
) -> dict[str, Path]:
    from .visualize import visualize

    paths = artifact_paths(cfg)
    written = visualize(cfg, kind, image_ids)
    return {f"viz_{i}": p for i, p in enumerate(written)} or {"viz": paths["viz"]}


PIPELINE_STAGES = [
    ("synth", stage_synth),
    ("gen-points", stage_gen_points),
    ("train-refiner", stage_train_refiner),
    ("refine", stage_refine),
    ("train-localizer", stage_train_localizer),
    ("evaluate", stage_evaluate),
]


def run_pipeline(cfg: ExperimentConfig) -> RunManifest:
    """Run all stages in order; a failing stage aborts with its name."""
    manifest = RunManifest(config_hash=config_hash(cfg), version=__version__)
    paths = artifact_paths(cfg)
    for name, fn in PIPELINE_STAGES:
        if cfg.skip_refine and name in ("train-refiner", "refine"):
            continue
        if cfg.cascade_mode == "iterative" and name == "train-refiner":
            continue  # the iterative loop trains inside the refine stage
        start = time.perf_counter()
        try:
            artifacts = fn(cfg)
        except Exception as e:
            manifest.save(paths["manifest"])
            raise StageError(name, e) from e
        manifest.seconds[name] = round(time.perf_counter() - start, 3)
        manifest.artifacts.update({k: str(v) for k, v in artifacts.items()})
    manifest.save(paths["manifest"])
    return manifest
