"""Feature extraction backbone, refinement heads and checkpoint I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


@dataclass
class FeatureMap:
    """Dense (h, w, d) feature array at a known stride."""

    data: torch.Tensor
    stride: int

    @property
    def extent(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])


class ConvFeatureExtractor(nn.Module):
    """Small trainable stem plus four 3x3 conv+ReLU layers.

    The stem downsamples by the configured stride (4 or 8) with stride-2
    convolutions, each producing ceil(n/2) cells, so the output extent is
    ceil(H/stride) x ceil(W/stride) for any input size.
    """

    def __init__(self, stride: int = 8, channels: int = 32, in_channels: int = 3):
        super().__init__()
        if stride not in (4, 8):
            raise ValueError("stride must be 4 or 8")
        self.stride = stride
        self.channels = channels
        widths = [max(16, channels // 2)] * (2 if stride == 4 else 3)
        widths[-1] = channels
        stem = []
        prev = in_channels
        for wd in widths:
            stem += [nn.Conv2d(prev, wd, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = wd
        self.stem = nn.Sequential(*stem)
        body = []
        for _ in range(4):
            body += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*body)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images in [0, 1] -> (B, d, h, w) features."""
        if images.shape[-2] < self.stride or images.shape[-1] < self.stride:
            raise ValueError(
                f"image {tuple(images.shape[-2:])} smaller than one stride cell"
            )
        return self.body(self.stem(images - 0.5))


class StageHeads(nn.Module):
    """Per-stage classification and instance-selection linear heads."""

    def __init__(self, channels: int, num_categories: int):
        super().__init__()
        self.fc_cls = nn.Linear(channels, num_categories)
        self.fc_ins = nn.Linear(channels, num_categories)


class PointRefiner(nn.Module):
    """Shared extractor, one head pair per cascade stage, and a variance head."""

    def __init__(
        self,
        num_categories: int,
        num_stages: int = 1,
        stride: int = 8,
        channels: int = 32,
    ):
        super().__init__()
        self.num_categories = num_categories
        self.num_stages = num_stages
        self.extractor = ConvFeatureExtractor(stride=stride, channels=channels)
        self.heads = nn.ModuleList(
            StageHeads(channels, num_categories) for _ in range(num_stages)
        )
        self.var_head = nn.Conv2d(channels, num_categories, 1)

    @property
    def stride(self) -> int:
        return self.extractor.stride

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, h, w, d), channels last for point lookups."""
        return self.extractor(images).permute(0, 2, 3, 1)


def bilinear_features(features: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample an (h, w, d) map at real-valued (x, y) points, differentiably.

    Integer points return the exact stored vector. Points outside
    [0, w-1] x [0, h-1] (beyond a tiny tolerance) are a caller error: bags
    are pre-filtered to the map.
    """
    h, w = features.shape[0], features.shape[1]
    x, y = points[:, 0], points[:, 1]
    tol = 1e-6
    if ((x < -tol) | (x > w - 1 + tol) | (y < -tol) | (y > h - 1 + tol)).any():
        raise ValueError("point outside the feature map")
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0f, y0f = x.floor(), y.floor()
    tx = (x - x0f).unsqueeze(1)
    ty = (y - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    top = (1 - tx) * features[y0, x0] + tx * features[y0, x1]
    bot = (1 - tx) * features[y1, x0] + tx * features[y1, x1]
    return (1 - ty) * top + ty * bot


def feature_at(fmap: FeatureMap, point: tuple[float, float]) -> torch.Tensor:
    """Bilinear lookup of a single point on a FeatureMap."""
    pts = torch.tensor([point], dtype=fmap.data.dtype, device=fmap.data.device)
    return bilinear_features(fmap.data, pts)[0]


def images_to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    """Stack same-sized float HWC images in [0, 1] into a (B, 3, H, W) batch."""
    arr = np.stack(images).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def save_refiner(
    model: PointRefiner,
    path: str | Path,
    categories: list[str],
    config_hash: str = "",
) -> None:
    payload = {
        "kind": "refiner",
        "state_dict": model.state_dict(),
        "categories": list(categories),
        "stride": model.stride,
        "channels": model.extractor.channels,
        "num_stages": model.num_stages,
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_refiner(path: str | Path) -> tuple[PointRefiner, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "refiner":
        raise ValueError(f"{path} is not a refiner checkpoint")
    model = PointRefiner(
        num_categories=len(payload["categories"]),
        num_stages=payload["num_stages"],
        stride=payload["stride"],
        channels=payload["channels"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
