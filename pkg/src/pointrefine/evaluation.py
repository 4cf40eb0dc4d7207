"""Point-box-distance matching and average-precision reporting.

A prediction matches a ground-truth box when the normalized distance
sqrt(((x-xc)/w)^2 + ((y-yc)/h)^2) is below the threshold tau. Matching is
greedy over descending score; each prediction takes the closest unmatched
ground truth. Predictions whose only matches are ignore-flagged ground
truths count as neither true nor false positives.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import AREA_MEDIUM, AREA_SMALL, Dataset

SCALE_BINS = {
    "small": (0.0, AREA_SMALL),
    "medium": (AREA_SMALL, AREA_MEDIUM),
    "large": (AREA_MEDIUM, np.inf),
}


@dataclass
class EvalMatch:
    prediction: int  # index into the (score-sorted) prediction list
    gt: int | None
    distance: float
    verdict: str  # TP | FP | ignored


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def point_box_distance(
    point: tuple[float, float], box: tuple[float, float, float, float]
) -> float:
    """Dimensionless distance between a point and a center-format box."""
    xc, yc, w, h = box
    if w <= 0 or h <= 0:
        raise ValueError("box must have positive extent")
    return float(np.hypot((point[0] - xc) / w, (point[1] - yc) / h))


def match_image(
    predictions: list[tuple[float, float, float]],
    gts: list[tuple[tuple[float, float, float, float], bool]],
    tau: float,
) -> list[EvalMatch]:
    """Greedy single-category matching of (x, y, score) predictions.

    Predictions are processed in descending score order (ties keep input
    order). Each takes the unmatched non-ignore ground truth with the
    smallest distance below tau; failing that, a close-enough ignore region
    absorbs it; otherwise it is a false positive.
    """
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i][2], i))
    taken = [False] * len(gts)
    matches = []
    for idx in order:
        x, y, _ = predictions[idx]
        best_gt, best_d = None, np.inf
        best_ign, best_ign_d = None, np.inf
        for g, (box, ignore) in enumerate(gts):
            d = point_box_distance((x, y), box)
            if d >= tau:
                continue
            if ignore:
                if d < best_ign_d:
                    best_ign, best_ign_d = g, d
            elif not taken[g] and d < best_d:
                best_gt, best_d = g, d
        if best_gt is not None:
            taken[best_gt] = True
            matches.append(EvalMatch(idx, best_gt, best_d, "TP"))
        elif best_ign is not None:
            matches.append(EvalMatch(idx, best_ign, best_ign_d, "ignored"))
        else:
            matches.append(EvalMatch(idx, None, np.inf, "FP"))
    return matches


def pr_curve(scored_flags: list[tuple[float, bool]], num_gts: int) -> PRCurve:
    """101-point interpolated AP from (score, is_tp) pairs.

    Ignored predictions must already be filtered out; num_gts counts the
    non-ignored ground truths.
    """
    if num_gts <= 0:
        raise ValueError("num_gts must be positive")
    if not scored_flags:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0)
    order = sorted(range(len(scored_flags)), key=lambda i: (-scored_flags[i][0], i))
    flags = np.array([scored_flags[i][1] for i in order], dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / (tp + fp)
    recall = tp / num_gts
    # precision envelope: best precision at any recall >= t
    env = np.maximum.accumulate(precision[::-1])[::-1]
    thresholds = np.linspace(0.0, 1.0, 101)
    interp = np.zeros(101)
    idx = np.searchsorted(recall, thresholds, side="left")
    valid = idx < len(recall)
    interp[valid] = env[idx[valid]]
    ap = float(interp.mean())
    return PRCurve(precision, recall, ap)


def average_precision(scored_flags: list[tuple[float, bool]], num_gts: int) -> float:
    return pr_curve(scored_flags, num_gts).ap


def _category_ap(
    predictions: dict[int, list[tuple[float, float, float]]],
    gts: dict[int, list[tuple[tuple[float, float, float, float], bool]]],
    tau: float,
) -> float | None:
    """AP for one category across images; None when it has no ground truth."""
    num_gts = sum(1 for recs in gts.values() for _, ign in recs if not ign)
    if num_gts == 0:
        return None
    scored: list[tuple[float, bool]] = []
    for image_id in sorted(set(predictions) | set(gts)):
        preds = predictions.get(image_id, [])
        matches = match_image(preds, gts.get(image_id, []), tau)
        for m in matches:
            if m.verdict == "ignored":
                continue
            scored.append((preds[m.prediction][2], m.verdict == "TP"))
    return average_precision(scored, num_gts)


def map_report(
    predictions: dict[int, list[dict]],
    dataset: Dataset,
    taus: tuple[float, ...] = (0.5, 1.0, 2.0),
) -> dict:
    """mAP per threshold plus scale-binned mAP at tau = 1.0.

    predictions maps image_id to records {"category", "x", "y", "score"}.
    Categories without ground truth are skipped from the means with a
    warning. For a scale bin, ground truths outside the bin become ignore
    regions so predictions matched to them are dropped rather than counted
    as false positives.
    """
    kc = dataset.num_categories
    preds_by_cat: list[dict[int, list[tuple[float, float, float]]]] = [
        {} for _ in range(kc)
    ]
    for image_id, recs in predictions.items():
        for r in recs:
            preds_by_cat[int(r["category"])].setdefault(int(image_id), []).append(
                (float(r["x"]), float(r["y"]), float(r["score"]))
            )

    def gts_by_cat(area_range=None):
        table: list[dict[int, list]] = [{} for _ in range(kc)]
        for rec in dataset.images:
            for obj in rec.objects:
                ignore = obj.ignore
                if area_range is not None and not ignore:
                    lo, hi = area_range
                    if not (lo <= obj.area < hi):
                        ignore = True
                table[obj.category].setdefault(rec.image_id, []).append(
                    (obj.box, ignore)
                )
        return table

    report: dict = {"per_category": {}}
    base_gts = gts_by_cat()
    for tau in taus:
        aps = []
        for k in range(kc):
            ap = _category_ap(preds_by_cat[k], base_gts[k], tau)
            if ap is None:
                warnings.warn(f"category {dataset.categories[k]!r} has no ground truth")
                continue
            aps.append(ap)
            report["per_category"].setdefault(dataset.categories[k], {})[
                f"ap_{tau}"
            ] = ap
        report[f"map_{tau}"] = float(np.mean(aps)) if aps else 0.0
    for name, area_range in SCALE_BINS.items():
        binned = gts_by_cat(area_range)
        aps = []
        for k in range(kc):
            ap = _category_ap(preds_by_cat[k], binned[k], 1.0)
            if ap is not None:
                aps.append(ap)
        report[f"map_{name}"] = float(np.mean(aps)) if aps else 0.0
    return report


def format_metrics_table(report: dict) -> str:
    """Aligned plain-text rendering of a metrics report."""
    rows = [(k, v) for k, v in report.items() if isinstance(v, float)]
    width = max(len(k) for k, _ in rows)
    lines = [f"{k:<{width}}  {v * 100:6.2f}" for k, v in rows]
    per_cat = report.get("per_category", {})
    for cat, vals in per_cat.items():
        for metric, v in vals.items():
            lines.append(f"{cat + '/' + metric:<{width}}  {v * 100:6.2f}")
    return "\n".join(lines)
