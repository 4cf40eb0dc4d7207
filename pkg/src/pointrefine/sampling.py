"""Point-bag construction on concentric rings and per-category negatives.

All geometry lives in feature-map coordinates: x in [0, w-1], y in [0, h-1].
Bag points are real-valued; negative samples are integer grid points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Rounding a real point to the grid moves it by at most half a cell diagonal.
# Negatives keep this guard distance away from the sampling circles so no
# grid-rounded bag point can receive negative supervision. guard=0 gives the
# plain outside-the-circles set.
GRID_GUARD = float(np.sqrt(0.5)) + 1e-6


@dataclass
class SamplingRegion:
    """Per-object sampling center and integer ring radius."""

    object_id: int
    center: tuple[float, float]
    radius: int

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")


@dataclass
class PointBag:
    object_id: int
    category: int
    points: np.ndarray  # (N, 2) float64, each within the sampling radius


@dataclass
class NegativeSet:
    category: int
    points: np.ndarray  # (N, 2) int64 grid coordinates


def make_region(object_id: int, center: tuple[float, float], radius: float) -> SamplingRegion:
    """Build a region from a real-valued radius: floored, minimum 1."""
    return SamplingRegion(object_id, (float(center[0]), float(center[1])), max(1, int(np.floor(radius))))


def circle_points(center: tuple[float, float], r: int, u0: int) -> np.ndarray:
    """r*u0 points with equal angular spacing on the radius-r circle."""
    if r < 1 or u0 < 1:
        raise ValueError("r and u0 must be positive")
    n = r * u0
    angles = 2.0 * np.pi * np.arange(n) / n
    return np.stack(
        [center[0] + r * np.cos(angles), center[1] + r * np.sin(angles)], axis=1
    )


def rect_points(
    center: tuple[float, float], r: int, u0: int, aspect: float = 1.0
) -> np.ndarray:
    """r*u0 points with equal perimeter spacing on a rectangle ring.

    The rectangle has half-extents (r*sqrt(aspect), r/sqrt(aspect)) so its
    half-extent product matches the circle radius squared for any aspect.
    The walk starts at (cx + hx, cy) and proceeds in the +y direction, the
    analogue of the circle's angle-zero start.
    """
    if r < 1 or u0 < 1:
        raise ValueError("r and u0 must be positive")
    if aspect <= 0:
        raise ValueError("aspect must be positive")
    hx = r * np.sqrt(aspect)
    hy = r / np.sqrt(aspect)
    corners = np.array(
        [[hx, 0.0], [hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy], [hx, 0.0]]
    )
    seg = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = r * u0
    s = cum[-1] * np.arange(n) / n
    x = np.interp(s, cum, corners[:, 0]) + center[0]
    y = np.interp(s, cum, corners[:, 1]) + center[1]
    return np.stack([x, y], axis=1)


def build_bag(
    region: SamplingRegion,
    u0: int,
    map_extent: tuple[int, int],
    category: int = 0,
    shape: str = "circle",
    aspect: float = 1.0,
) -> PointBag:
    """Union of ring points for r = 1..radius, clipped to the feature map.

    Raises ValueError when every point falls outside [0, w-1] x [0, h-1],
    which signals a corrupted region.
    """
    h, w = map_extent
    ring = circle_points if shape == "circle" else rect_points
    kwargs = {} if shape == "circle" else {"aspect": aspect}
    pts = np.concatenate(
        [ring(region.center, r, u0, **kwargs) for r in range(1, region.radius + 1)]
    )
    keep = (
        (pts[:, 0] >= 0.0)
        & (pts[:, 0] <= w - 1)
        & (pts[:, 1] >= 0.0)
        & (pts[:, 1] <= h - 1)
    )
    pts = pts[keep]
    if len(pts) == 0:
        raise ValueError(
            f"empty bag for object {region.object_id}: center {region.center} "
            f"radius {region.radius} produced no in-map points"
        )
    return PointBag(region.object_id, category, pts)


def grid_points(map_extent: tuple[int, int]) -> np.ndarray:
    """All integer grid coordinates of an h x w feature map, as (h*w, 2)."""
    h, w = map_extent
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.int64)


def negative_mask(
    regions: list[SamplingRegion],
    map_extent: tuple[int, int],
    guard: float = GRID_GUARD,
) -> np.ndarray:
    """Bool mask over the flattened grid: outside every sampling circle."""
    pts = grid_points(map_extent).astype(np.float64)
    mask = np.ones(len(pts), dtype=bool)
    for reg in regions:
        d = np.hypot(pts[:, 0] - reg.center[0], pts[:, 1] - reg.center[1])
        mask &= d > reg.radius + guard
    return mask


def build_negatives(
    category: int,
    regions: list[SamplingRegion],
    map_extent: tuple[int, int],
    guard: float = GRID_GUARD,
) -> NegativeSet:
    """Grid points farther than every same-category sampling radius."""
    mask = negative_mask(regions, map_extent, guard)
    return NegativeSet(category, grid_points(map_extent)[mask])
