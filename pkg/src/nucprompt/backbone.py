"""Small convolutional encoder producing a 3-level feature pyramid.

Four stride-2 stages take the image to 1/16 resolution. The outputs of the
last three stages (strides 4, 8 and 16) are projected to a common channel
count by 1x1 lateral convolutions and fused top-down, FPN style.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError
from .util import seeded

PYRAMID_STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 32  # C_I, shared by all pyramid levels
    widths: tuple[int, int, int, int] = (16, 32, 48, 64)
    groups: int = 4


@dataclass
class FeaturePyramid:
    """Three ``C_I x h x w`` maps at strides 4, 8 and 16 (no batch dimension)."""

    levels: list[torch.Tensor]
    strides: tuple[int, ...] = PYRAMID_STRIDES

    @property
    def shallow(self) -> torch.Tensor:
        return self.levels[0]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]


def _group_count(width, groups):
    g = min(groups, width)
    while width % g:
        g -= 1
    return g


class _Stage(nn.Sequential):
    def __init__(self, cin, cout, groups):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1),
            nn.GroupNorm(_group_count(cout, groups), cout),
            nn.GELU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_group_count(cout, groups), cout),
            nn.GELU(),
        )


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        if config.channels < 8:
            raise ConfigError(f"pyramid channels must be >= 8, got {config.channels}")
        if len(config.widths) != 4 or any(w < 1 for w in config.widths):
            raise ConfigError(f"need 4 positive stage widths, got {config.widths}")
        self.config = config
        widths = (3,) + tuple(config.widths)
        self.stages = nn.ModuleList(
            _Stage(widths[i], widths[i + 1], config.groups) for i in range(4)
        )
        self.laterals = nn.ModuleList(nn.Conv2d(w, config.channels, 1) for w in config.widths[1:])

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        """``image`` is ``H x W x 3`` (channels last, as stored in a Scene)."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected an H x W x 3 image, got {tuple(image.shape)}")
        h, w = image.shape[:2]
        if h % 16 or w % 16:
            raise ShapeError(f"image size {h}x{w} is not divisible by 16")
        x = image.permute(2, 0, 1).unsqueeze(0)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        lat = [proj(f) for proj, f in zip(self.laterals, feats[1:])]
        for i in (1, 0):
            lat[i] = lat[i] + F.interpolate(lat[i + 1], size=lat[i].shape[-2:], mode="nearest")
        return FeaturePyramid([f[0] for f in lat])


def init_backbone(config: BackboneConfig = BackboneConfig(), seed: int = 0,
                  dtype=torch.float32) -> Backbone:
    """Build a backbone whose initial parameters depend only on ``seed``."""
    return seeded(seed, "backbone", lambda: Backbone(config), dtype)


def load_pyramid_features(path, dtype=torch.float32) -> FeaturePyramid:
    """Load externally computed features from an ``.npz`` with arrays level0..level2."""
    with np.load(Path(path)) as data:
        levels = [torch.as_tensor(data[f"level{i}"], dtype=dtype) for i in range(3)]
    c = levels[0].shape[0]
    for i, lvl in enumerate(levels):
        if lvl.ndim != 3 or lvl.shape[0] != c:
            raise ShapeError(f"level{i} has shape {tuple(lvl.shape)}, expected {c} x h x w")
    return FeaturePyramid(levels)
