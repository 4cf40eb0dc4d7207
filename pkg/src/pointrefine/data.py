"""Dataset ingestion, coarse-point generation and dataset bookkeeping.

Annotations are stored in a COCO-like JSON schema. The internal variant is
identical to COCO instances except that category ids are dense (0..K-1) and
each annotation may carry a "coarse_point": [x, y] field, so refined points
round-trip through the same files.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

AREA_SMALL = 32 ** 2
AREA_MEDIUM = 96 ** 2

MAX_REJECTION_DRAWS = 10000


class SchemaError(ValueError):
    """Annotation file violates the expected schema or an invariant."""


class AnnotationParseError(ValueError):
    """Annotation file could not be parsed at all."""


@dataclass
class ObjectAnnotation:
    """One ground-truth object: category, center-based box, optional mask."""

    object_id: int
    category: int
    box: tuple[float, float, float, float]  # (x_center, y_center, w, h) px
    segmentation: list[list[float]] | None = None  # COCO-style polygons
    mask: np.ndarray | None = None  # bool raster at image resolution
    ignore: bool = False

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]

    def contains(self, x: float, y: float) -> bool:
        """Whether point (x, y) falls inside the mask (or box if maskless)."""
        xc, yc, w, h = self.box
        if not (abs(x - xc) <= w / 2 and abs(y - yc) <= h / 2):
            return False
        if self.mask is None:
            return True
        mh, mw = self.mask.shape
        col, row = int(np.floor(x)), int(np.floor(y))
        if not (0 <= row < mh and 0 <= col < mw):
            return False
        return bool(self.mask[row, col])

    def interior_centroid(self) -> tuple[float, float]:
        """Centroid of the mask-on pixels, or the box center if maskless."""
        if self.mask is None or not self.mask.any():
            return self.box[0], self.box[1]
        rows, cols = np.nonzero(self.mask)
        return float(cols.mean() + 0.5), float(rows.mean() + 0.5)


@dataclass
class CoarsePoint:
    """A single point annotation, image-space and real-valued."""

    object_id: int
    category: int
    position: tuple[float, float]


@dataclass
class ImageRecord:
    image_id: int
    width: int
    height: int
    objects: list[ObjectAnnotation] = field(default_factory=list)
    coarse_points: list[CoarsePoint] = field(default_factory=list)
    file_name: str | None = None

    def annotated_objects(self) -> list[ObjectAnnotation]:
        return [o for o in self.objects if not o.ignore]


@dataclass
class Dataset:
    images: list[ImageRecord]
    categories: list[str]

    @property
    def num_categories(self) -> int:
        return len(self.categories)


def scale_bin(obj: ObjectAnnotation) -> str:
    """Bin an object by box area; areas exactly on a threshold go upward."""
    area = obj.area
    if area < AREA_SMALL:
        return "small"
    if area < AREA_MEDIUM:
        return "medium"
    return "large"


def generate_coarse_point(
    obj: ObjectAnnotation,
    rng: np.random.Generator,
    sigma: float = 0.25,
) -> CoarsePoint:
    """Draw a coarse point from a box-centered Gaussian truncated to the mask.

    The per-axis offset from the box center is normalized by the box extent,
    so the box edges sit at +-1/2. Truncation is by rejection, which keeps
    the renormalized density exact. A pathological mask that rejects 10k
    consecutive draws falls back to the mask centroid with a warning.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xc, yc, w, h = obj.box
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box for object {obj.object_id}")
    for _ in range(MAX_REJECTION_DRAWS):
        u = rng.normal(0.0, sigma)
        v = rng.normal(0.0, sigma)
        x, y = xc + u * w, yc + v * h
        if obj.contains(x, y):
            return CoarsePoint(obj.object_id, obj.category, (x, y))
    warnings.warn(
        f"rejection sampling failed for object {obj.object_id}; "
        "falling back to the mask centroid"
    )
    return CoarsePoint(obj.object_id, obj.category, obj.interior_centroid())


def generate_dataset_points(dataset: Dataset, seed: int, sigma: float = 0.25) -> None:
    """Attach one coarse point to every non-ignored object, in place."""
    rng = np.random.default_rng(seed)
    for rec in dataset.images:
        rec.coarse_points = [
            generate_coarse_point(obj, rng, sigma) for obj in rec.annotated_objects()
        ]


def rasterize_polygons(
    polygons: list[list[float]], width: int, height: int
) -> np.ndarray:
    """Fill COCO-style [x1, y1, x2, y2, ...] polygons into a bool raster."""
    img = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(img)
    for poly in polygons:
        if len(poly) >= 6:
            pts = list(zip(poly[0::2], poly[1::2]))
            draw.polygon(pts, outline=1, fill=1)
    return np.asarray(img, dtype=bool)


def _clip_box_to_image(
    bbox: list[float], width: int, height: int
) -> tuple[float, float, float, float]:
    """COCO [x, y, w, h] -> clipped center-based (xc, yc, w, h)."""
    x0 = max(0.0, float(bbox[0]))
    y0 = max(0.0, float(bbox[1]))
    x1 = min(float(width), float(bbox[0]) + float(bbox[2]))
    y1 = min(float(height), float(bbox[1]) + float(bbox[3]))
    return (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0


def _mask_inside_box(
    mask: np.ndarray, box: tuple[float, float, float, float]
) -> np.ndarray:
    """Zero out mask pixels whose centers fall outside the (clipped) box."""
    xc, yc, w, h = box
    rows = np.arange(mask.shape[0]) + 0.5
    cols = np.arange(mask.shape[1]) + 0.5
    inside = (np.abs(rows[:, None] - yc) <= h / 2) & (np.abs(cols[None, :] - xc) <= w / 2)
    return mask & inside


def _parse_annotation(
    ann: dict,
    rec: ImageRecord,
    cat_remap: dict[int, int],
) -> tuple[ObjectAnnotation, CoarsePoint | None]:
    ann_id = ann.get("id", "?")
    if "bbox" not in ann:
        raise SchemaError(f"annotation {ann_id} has no bbox")
    box = _clip_box_to_image(ann["bbox"], rec.width, rec.height)
    if box[2] <= 0 or box[3] <= 0:
        raise SchemaError(f"annotation {ann_id} has an empty box after clipping")
    if ann.get("category_id") not in cat_remap:
        raise SchemaError(f"annotation {ann_id} references unknown category")
    category = cat_remap[ann["category_id"]]
    segmentation = ann.get("segmentation") or None
    mask = None
    if isinstance(segmentation, list) and segmentation:
        mask = rasterize_polygons(segmentation, rec.width, rec.height)
        mask = _mask_inside_box(mask, box)
        if not mask.any():
            mask = None  # degenerate polygon: fall back to the box
    ignore = bool(ann.get("ignore", 0)) or bool(ann.get("iscrowd", 0))
    obj = ObjectAnnotation(
        object_id=int(ann_id) if isinstance(ann_id, int) else len(rec.objects),
        category=category,
        box=box,
        segmentation=segmentation if isinstance(segmentation, list) else None,
        mask=mask,
        ignore=ignore,
    )
    point = None
    if "coarse_point" in ann and ann["coarse_point"] is not None:
        px, py = ann["coarse_point"]
        point = CoarsePoint(obj.object_id, category, (float(px), float(py)))
    return obj, point


def load_dataset(path: str | Path, format: str = "internal-json") -> Dataset:
    """Load a COCO-format or internal-format annotation file.

    format "coco-json" remaps arbitrary category ids to dense 0..K-1 by
    sorted original id; "internal-json" requires the ids to be dense already.
    """
    path = Path(path)
    try:
        with open(path) as f:
            blob = json.load(f)
    except json.JSONDecodeError as e:
        raise AnnotationParseError(f"{path}: malformed JSON ({e})") from e
    if "categories" not in blob or not blob["categories"]:
        raise SchemaError(f"{path}: missing category table")
    if format not in ("coco-json", "internal-json"):
        raise ValueError(f"unknown dataset format {format!r}")

    cats = sorted(blob["categories"], key=lambda c: c["id"])
    if format == "internal-json":
        ids = [c["id"] for c in cats]
        if ids != list(range(len(ids))):
            raise SchemaError(f"{path}: internal format requires dense category ids")
    cat_remap = {c["id"]: i for i, c in enumerate(cats)}
    categories = [str(c.get("name", c["id"])) for c in cats]

    records: dict[int, ImageRecord] = {}
    for img in blob.get("images", []):
        try:
            rec = ImageRecord(
                image_id=int(img["id"]),
                width=int(img["width"]),
                height=int(img["height"]),
                file_name=img.get("file_name"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{path}: bad image record {img.get('id', '?')}: {e}") from e
        records[rec.image_id] = rec

    for ann in blob.get("annotations", []):
        img_id = ann.get("image_id")
        if img_id not in records:
            raise SchemaError(f"annotation {ann.get('id', '?')} references unknown image {img_id}")
        rec = records[img_id]
        obj, point = _parse_annotation(ann, rec, cat_remap)
        rec.objects.append(obj)
        if point is not None and not obj.ignore:
            rec.coarse_points.append(point)

    return Dataset(images=list(records.values()), categories=categories)


def save_dataset(
    dataset: Dataset,
    path: str | Path,
    annotation_extras: dict | None = None,
    top_level: dict | None = None,
) -> None:
    """Write the internal JSON schema (dense category ids, coarse points).

    annotation_extras maps (image_id, object_id) to extra fields merged into
    the annotation records, e.g. refinement provenance; top_level fields are
    merged into the file root.
    """
    points = {
        (rec.image_id, cp.object_id): cp
        for rec in dataset.images
        for cp in rec.coarse_points
    }
    blob = {
        "images": [
            {
                "id": rec.image_id,
                "width": rec.width,
                "height": rec.height,
                **({"file_name": rec.file_name} if rec.file_name else {}),
            }
            for rec in dataset.images
        ],
        "annotations": [],
        "categories": [{"id": i, "name": n} for i, n in enumerate(dataset.categories)],
    }
    for rec in dataset.images:
        for obj in rec.objects:
            xc, yc, w, h = obj.box
            ann = {
                "id": obj.object_id,
                "image_id": rec.image_id,
                "category_id": obj.category,
                "bbox": [xc - w / 2, yc - h / 2, w, h],
                "area": obj.area,
                "ignore": int(obj.ignore),
            }
            if obj.segmentation is not None:
                ann["segmentation"] = obj.segmentation
            cp = points.get((rec.image_id, obj.object_id))
            if cp is not None:
                ann["coarse_point"] = [cp.position[0], cp.position[1]]
            if annotation_extras:
                ann.update(annotation_extras.get((rec.image_id, obj.object_id), {}))
            blob["annotations"].append(ann)
    if top_level:
        blob.update(top_level)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(blob, f)


def load_image(dataset_dir: str | Path, rec: ImageRecord) -> np.ndarray:
    """Load an image referenced by a record as float32 HWC in [0, 1]."""
    if rec.file_name is None:
        raise ValueError(f"image {rec.image_id} has no file_name")
    img = Image.open(Path(dataset_dir) / rec.file_name).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0
