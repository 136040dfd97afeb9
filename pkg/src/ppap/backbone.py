"""Toy image encoder, pixel projection, keypoint head and heatmap encode/decode.

Coordinate convention: a heatmap cell ``c`` on a grid of stride ``s`` is
centred on input pixel coordinate ``c * s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ppap.errors import InvalidArgument


@dataclass
class HeatmapTarget:
    heatmaps: torch.Tensor  # (..., K, H, W)
    weights: torch.Tensor  # (..., K) in {0, 1}


class ImageEncoder(nn.Module):
    """Three stride-2 conv blocks: ``(B, 3, H, W) -> (B, C_feat, H/8, W/8)``.

    Each block is a stride-2 3x3 conv, GroupNorm and GELU.
    """

    def __init__(self, feat_dim: int = 64, widths: tuple[int, int] = (32, 64)):
        super().__init__()
        chans = [3, *widths, feat_dim]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                       nn.GroupNorm(math.gcd(8, cout), cout), nn.GELU()]
        self.net = nn.Sequential(*layers)
        self.feat_dim = feat_dim

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() < 3 or img.shape[-3] != 3:
            raise InvalidArgument(f"expected 3 image channels, got shape {tuple(img.shape)}")
        return self.net(img)


def encode_image(img: torch.Tensor, enc: ImageEncoder) -> torch.Tensor:
    return enc(img)


class PixelProjector(nn.Module):
    """Bias-free 1x1 projection to the embedding width, then per-pixel L2 norm."""

    def __init__(self, feat_dim: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(feat_dim, embed_dim, 1, bias=False)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        x = self.proj(feat).flatten(-2).transpose(-1, -2)  # (B, HW, C)
        return F.normalize(x, dim=-1, eps=1e-12)


def project_pixels(feat: torch.Tensor, proj: PixelProjector) -> torch.Tensor:
    return proj(feat)


class KeypointHead(nn.Module):
    """Concatenate features with the score map, two x2 deconvs, 1x1 conv to K."""

    def __init__(self, feat_dim: int, num_keypoints: int, width: int = 32):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.up = nn.Sequential(
            nn.ConvTranspose2d(feat_dim + num_keypoints, width, 4, stride=2, padding=1),
            nn.GELU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.GELU(),
        )
        self.final = nn.Conv2d(width, num_keypoints, 1)

    def forward(self, feat: torch.Tensor, score: torch.Tensor) -> torch.Tensor:
        if feat.shape[-2:] != score.shape[-2:] or feat.shape[:-3] != score.shape[:-3]:
            raise InvalidArgument(
                f"feature {tuple(feat.shape)} and score map {tuple(score.shape)} disagree"
            )
        if score.shape[-3] != self.num_keypoints:
            raise InvalidArgument(f"score map has {score.shape[-3]} channels, expected {self.num_keypoints}")
        return self.final(self.up(torch.cat([feat, score], dim=-3)))


def head_forward(feat: torch.Tensor, score: torch.Tensor, head: KeypointHead) -> torch.Tensor:
    return head(feat, score)


def make_target_heatmap(keypoints, grid: tuple[int, int], sigma_px: float, stride: float) -> HeatmapTarget:
    """Render unit-peak Gaussians for visible keypoints.

    Args:
        keypoints: ``(K, 3)`` array of ``(x, y, visibility)`` in input pixels.
        grid: ``(H_t, W_t)`` size of the target grid.
        sigma_px: Gaussian std in input pixels.
        stride: input pixels per grid cell.
    """
    if sigma_px <= 0:
        raise InvalidArgument("sigma_px must be positive")
    kp = torch.as_tensor(np.asarray(keypoints, dtype=np.float64))
    h, w = grid
    ys = torch.arange(h, dtype=torch.float64) * stride
    xs = torch.arange(w, dtype=torch.float64) * stride
    dx2 = (xs[None, :] - kp[:, 0:1]) ** 2  # (K, W)
    dy2 = (ys[None, :] - kp[:, 1:2]) ** 2  # (K, H)
    maps = torch.exp(-(dy2[:, :, None] + dx2[:, None, :]) / (2.0 * sigma_px**2))
    vis = (kp[:, 2] > 0).to(torch.float64)
    maps = maps * vis[:, None, None]
    return HeatmapTarget(heatmaps=maps.float(), weights=vis.float())


def decode_keypoints(heatmaps: torch.Tensor, stride: float = 1.0) -> torch.Tensor:
    """Argmax plus a quarter-cell shift toward the larger neighbour.

    Returns ``(..., K, 3)`` rows of ``(x, y, score)`` in input pixels.
    """
    hm = torch.as_tensor(heatmaps).detach()
    h, w = hm.shape[-2:]
    flat = hm.flatten(-2)
    score, idx = flat.max(dim=-1)  # first max wins on ties
    row = torch.div(idx, w, rounding_mode="floor")
    col = idx % w
    x = col.to(hm.dtype)
    y = row.to(hm.dtype)

    floor = flat.min(dim=-1).values

    def at(r, c):
        # neighbours outside the grid read as the channel minimum, so an edge peak
        # still shifts inward while a flat map does not shift at all
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        r = r.clamp(0, h - 1)
        c = c.clamp(0, w - 1)
        val = flat.gather(-1, (r * w + c).unsqueeze(-1)).squeeze(-1)
        return torch.where(inside, val, floor)

    if w > 1:
        dx = torch.sign(at(row, col + 1) - at(row, col - 1))
    else:
        dx = torch.zeros_like(x)
    if h > 1:
        dy = torch.sign(at(row + 1, col) - at(row - 1, col))
    else:
        dy = torch.zeros_like(y)
    x = (x + 0.25 * dx) * stride
    y = (y + 0.25 * dy) * stride
    return torch.stack([x, y, score], dim=-1)
