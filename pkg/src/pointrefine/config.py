"""Flat key-value experiment configuration with a typed schema.

Config files hold `key = value` lines (# comments allowed). Unknown keys are
errors so ablation typos fail loudly. Defaults follow the published method
settings where one exists; dataset-scale knobs are meant to be overridden
per experiment.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

CASCADE_MODES = ("single", "cascade1", "cascade2", "iterative")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    dataset_dir: str = ""  # defaults to <out_dir>/data

    # synthetic dataset
    synth_train_images: int = 50
    synth_test_images: int = 10
    synth_categories: int = 3
    synth_min_size: float = 8.0
    synth_max_size: float = 120.0
    synth_clutter: int = 1
    synth_image_size: int = 128
    synth_max_objects: int = 4

    # coarse-point generation
    point_sigma: float = 0.25

    # refiner
    stride: int = 8
    feat_channels: int = 32
    r_init: int = 20
    stages: int = 3
    u0: int = 8
    sampling_shape: str = "circle"
    rect_aspect: float = 1.0
    delta1: float = 0.1
    delta2: float = 0.5
    alpha_ann: float = 0.5
    alpha_neg: float = 3.0
    gamma: float = 2.0
    cascade_mode: str = "cascade2"
    use_var_loss: bool = True
    var_sigma: float = 0.0  # 0 -> per-object estimated radius
    neg_per_point: bool = False
    nearest_all_categories: bool = False
    refine_iterations: int = 1
    refiner_epochs: int = 8
    refiner_lr: float = 0.001
    refiner_batch: int = 8
    skip_refine: bool = False

    # localizer
    localizer_epochs: int = 10
    localizer_lr: float = 0.001
    localizer_batch: int = 8
    localizer_topk: int = 4
    lambda_reg: float = 1.0
    nms_box: float = 16.0
    nms_iou: float = 0.5
    score_threshold: float = 0.05

    # evaluation
    taus: tuple[float, ...] = (0.5, 1.0, 2.0)

    def validate(self) -> "ExperimentConfig":
        if self.cascade_mode not in CASCADE_MODES:
            raise ValueError(f"cascade_mode must be one of {CASCADE_MODES}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.cascade_mode == "single" and self.stages != 1:
            raise ValueError("cascade_mode 'single' requires stages = 1")
        if self.stride not in (4, 8):
            raise ValueError("stride must be 4 or 8")
        if self.r_init < 1:
            raise ValueError("r_init must be >= 1")
        if self.sampling_shape not in ("circle", "rect"):
            raise ValueError("sampling_shape must be 'circle' or 'rect'")
        return self


def _parse_value(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: cannot parse bool from {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw
    if target_type == tuple[float, ...]:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    raise TypeError(f"unsupported config type for {key!r}")


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    schema = {f.name: f.type for f in fields(ExperimentConfig)}
    resolved = {
        "int": int,
        "float": float,
        "bool": bool,
        "str": str,
        "tuple[float, ...]": tuple[float, ...],
    }
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in schema:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        t = schema[key]
        target = resolved[t] if isinstance(t, str) else t
        setattr(cfg, key, _parse_value(raw, target, key))
    return cfg.validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        cfg = parse_config(Path(path).read_text(), cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]
