"""Synthetic shapes dataset: colored polygons over textured backgrounds.

Categories are shape kinds (disk, box, triangle) with per-category color
palettes. Masks are exact: the polygon drawn into the image is the polygon
stored with the annotation, so rasterization round-trips losslessly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import Dataset, ImageRecord, ObjectAnnotation, rasterize_polygons, save_dataset

SHAPE_KINDS = ["disk", "box", "triangle"]

CATEGORY_COLORS = [
    (205, 70, 60),  # disk: red-ish
    (70, 170, 80),  # box: green-ish
    (70, 100, 205),  # triangle: blue-ish
]


def _shape_polygon(
    kind: str, cx: float, cy: float, size: float, rng: np.random.Generator
) -> list[float]:
    """One flat [x1, y1, x2, y2, ...] polygon of roughly the given size."""
    if kind == "disk":
        angles = np.linspace(0, 2 * np.pi, 72, endpoint=False)
        xs = cx + (size / 2) * np.cos(angles)
        ys = cy + (size / 2) * np.sin(angles)
    elif kind == "box":
        ar = rng.uniform(0.75, 1.3)
        hw, hh = size * np.sqrt(ar) / 2, size / np.sqrt(ar) / 2
        xs = np.array([cx - hw, cx + hw, cx + hw, cx - hw])
        ys = np.array([cy - hh, cy - hh, cy + hh, cy + hh])
    elif kind == "triangle":
        base = np.array([[0.0, -0.55], [-0.5, 0.45], [0.5, 0.45]]) * size
        theta = rng.uniform(-0.4, 0.4)
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        pts = base @ rot.T + [cx, cy]
        xs, ys = pts[:, 0], pts[:, 1]
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return [float(v) for pair in zip(xs, ys) for v in pair]


def _textured_background(
    size: int, clutter: int, rng: np.random.Generator
) -> np.ndarray:
    """Gray background with blocky low-frequency texture and pixel noise."""
    base = rng.uniform(95, 135)
    img = np.full((size, size, 3), base, dtype=np.float64)
    if clutter > 0:
        block = max(4, size // 16)
        coarse = rng.normal(0, 6.0 * clutter, (size // block + 1, size // block + 1, 3))
        coarse = np.kron(coarse, np.ones((block, block, 1)))[:size, :size]
        img += coarse
        img += rng.normal(0, 2.5 * clutter, img.shape)
    return img


def _draw_distractors(
    draw: ImageDraw.ImageDraw, size: int, clutter: int, rng: np.random.Generator
) -> None:
    """Neutral-toned blobs that are not annotated objects."""
    for _ in range(rng.integers(0, 2 * clutter + 1)):
        s = rng.uniform(6, 22)
        cx, cy = rng.uniform(s, size - s, 2)
        tone = int(rng.uniform(70, 180))
        jitter = rng.integers(-12, 13, 3)
        color = tuple(int(np.clip(tone + j, 0, 255)) for j in jitter)
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.4, 1.0, n) * s / 2
        pts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for r, a in zip(radii, angles)]
        draw.polygon(pts, fill=color)


def _mask_box(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    """Tight center-format box around the mask-on pixels."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return None
    x0, x1 = float(cols.min()), float(cols.max() + 1)
    y0, y1 = float(rows.min()), float(rows.max() + 1)
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _box_iou(a, b) -> float:
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def synth_dataset(
    out_dir: str | Path,
    num_images: int,
    num_categories: int = 3,
    size_range: tuple[float, float] = (8.0, 120.0),
    clutter: int = 1,
    seed: int = 0,
    image_size: int = 128,
    max_objects: int = 4,
    prefix: str = "train",
    max_overlap: float = 0.1,
) -> Dataset:
    """Generate images plus exact masks/boxes; deterministic given the seed.

    Object sizes are drawn log-uniformly over size_range, so a wide enough
    range populates all three area bins. Writes PNGs under out_dir/images
    and the annotation file out_dir/<prefix>.json.
    """
    if not (1 <= num_categories <= len(SHAPE_KINDS)):
        raise ValueError(f"num_categories must be in 1..{len(SHAPE_KINDS)}")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images: list[ImageRecord] = []
    ann_id = 0
    for i in range(num_images):
        bg = _textured_background(image_size, clutter, rng)
        img = Image.fromarray(np.clip(bg, 0, 255).astype(np.uint8))
        draw = ImageDraw.Draw(img)
        _draw_distractors(draw, image_size, clutter, rng)
        rec = ImageRecord(
            image_id=i,
            width=image_size,
            height=image_size,
            file_name=f"images/{prefix}_{i:05d}.png",
        )
        n_obj = int(rng.integers(1, max_objects + 1))
        boxes: list[tuple[float, float, float, float]] = []
        for _ in range(n_obj):
            k = int(rng.integers(0, num_categories))
            lo, hi = size_range
            size = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            size = min(size, image_size - 8)
            for _attempt in range(20):
                margin = size / 2 + 2
                if image_size - margin <= margin:
                    break
                cx = float(rng.uniform(margin, image_size - margin))
                cy = float(rng.uniform(margin, image_size - margin))
                poly = _shape_polygon(SHAPE_KINDS[k], cx, cy, size, rng)
                mask = rasterize_polygons([poly], image_size, image_size)
                box = _mask_box(mask)
                if box is None:
                    continue
                if all(_box_iou(box, b) <= max_overlap for b in boxes):
                    jitter = rng.integers(-25, 26, 3)
                    color = tuple(
                        int(np.clip(c + j, 0, 255))
                        for c, j in zip(CATEGORY_COLORS[k], jitter)
                    )
                    draw.polygon(list(zip(poly[0::2], poly[1::2])), fill=color)
                    rec.objects.append(
                        ObjectAnnotation(
                            object_id=ann_id,
                            category=k,
                            box=box,
                            segmentation=[poly],
                            mask=mask,
                        )
                    )
                    boxes.append(box)
                    ann_id += 1
                    break
        img.save(out_dir / rec.file_name)
        images.append(rec)
    dataset = Dataset(images=images, categories=SHAPE_KINDS[:num_categories])
    save_dataset(dataset, out_dir / f"{prefix}.json")
    return dataset
