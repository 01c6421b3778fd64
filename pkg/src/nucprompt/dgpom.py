"""Distribution-guided proposal offsets.

A fixed grid of proposals (one per stride-4 cell) is shifted by offsets
predicted from a decoded shallow feature map, then refined a second time by a
regression head reading multi-level features at the shifted locations. A
density head on the same decoded map is supervised only through its total
mass, which must match the instance count.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import FeaturePyramid
from .errors import ConfigError, NumericError, ShapeError


@dataclass
class ProposalSet:
    initial: torch.Tensor  # K x 2
    deform_offsets: torch.Tensor  # K x 2
    deformed: torch.Tensor  # initial + deform_offsets
    offsets: torch.Tensor  # K x 2
    points: torch.Tensor  # deformed + offsets

    @property
    def k(self) -> int:
        return self.initial.shape[0]


def make_proposal_grid(height: int, width: int, stride: int = 4, dtype=torch.float32) -> torch.Tensor:
    """Cell-center proposals in row-major order, ``(x, y)`` per row."""
    if stride <= 0 or height % stride or width % stride:
        raise ShapeError(f"stride {stride} does not divide {height}x{width}")
    ys = (torch.arange(height // stride, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(width // stride, dtype=dtype) + 0.5) * stride
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)


def bilinear_sample(feature_map: torch.Tensor, coords: torch.Tensor, stride: float) -> torch.Tensor:
    """Sample a ``C x h x w`` map at image-frame ``(x, y)`` coordinates.

    Image coordinate ``p`` maps to feature coordinate ``p / stride - 0.5`` so that
    cell centers are hit exactly. Coordinates beyond the grid are clamped to the
    border. Returns ``K x C``.
    """
    if torch.isnan(coords).any():
        raise NumericError("NaN in sampling coordinates")
    _, h, w = feature_map.shape
    u = (coords[:, 0] / stride - 0.5).clamp(0, w - 1)
    v = (coords[:, 1] / stride - 0.5).clamp(0, h - 1)
    u0 = u.detach().floor().clamp(max=max(w - 2, 0))
    v0 = v.detach().floor().clamp(max=max(h - 2, 0))
    fu = u - u0
    fv = v - v0
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    flat = feature_map.reshape(feature_map.shape[0], -1)
    f00 = flat[:, v0 * w + u0]
    f01 = flat[:, v0 * w + u1]
    f10 = flat[:, v1 * w + u0]
    f11 = flat[:, v1 * w + u1]
    top = f00 * (1 - fu) + f01 * fu
    bottom = f10 * (1 - fu) + f11 * fu
    return (top * (1 - fv) + bottom * fv).T


def sample_pyramid(pyramid: FeaturePyramid, coords: torch.Tensor) -> torch.Tensor:
    """Concatenate samples from every pyramid level: ``K x (levels * C_I)``."""
    return torch.cat(
        [bilinear_sample(lvl, coords, s) for lvl, s in zip(pyramid.levels, pyramid.strides)], dim=1
    )


class DistributionDecoder(nn.Module):
    """conv -> ReLU -> conv -> ReLU on the shallow level; output is non-negative."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad)

    def forward(self, shallow: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(shallow.unsqueeze(0)))
        return F.relu(self.conv2(x))[0]


class PointMLP(nn.Module):
    """Two-layer perceptron emitting a 2-vector offset per proposal.

    The output layer starts at exactly zero so the module is an identity
    displacement until trained. ``scale`` converts the raw output to pixels.
    """

    def __init__(self, in_dim: int, hidden: int, scale: float = 1.0):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, 2)
        self.scale = scale
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(F.relu(self.hidden(x))) * self.scale


class DensityLayer(nn.Module):
    """1x1 conv to one channel followed by softplus, so density is non-negative."""

    def __init__(self, channels: int, bias_init: float = -4.0):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)
        nn.init.constant_(self.conv.bias, bias_init)

    def forward(self, decoded: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.conv(decoded.unsqueeze(0)))


def distribution_decode(shallow: torch.Tensor, decoder: DistributionDecoder) -> torch.Tensor:
    return decoder(shallow)


def deform_proposals(decoded, initial, deform_layer: PointMLP, stride: float = 4):
    """Return ``(offsets, initial + offsets)`` from features sampled at ``initial``."""
    offsets = deform_layer(bilinear_sample(decoded, initial, stride))
    return offsets, initial + offsets


def regress_points(pyramid: FeaturePyramid, deformed, reg_head: PointMLP):
    """Return ``(offsets, deformed + offsets)`` from multi-level samples at ``deformed``."""
    offsets = reg_head(sample_pyramid(pyramid, deformed))
    return offsets, deformed + offsets


def density_map(decoded: torch.Tensor, layer: DensityLayer) -> torch.Tensor:
    """``1 x 1 x h x w`` non-negative density at the shallow resolution."""
    return layer(decoded)


def count_loss(density: torch.Tensor, n) -> torch.Tensor:
    """Absolute error between the density mass and the true count."""
    if n < 0:
        raise ConfigError(f"instance count must be non-negative, got {n}")
    return (density.sum() - n).abs()
