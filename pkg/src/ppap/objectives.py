"""Spatial, feature, prediction and total training objectives."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from ppap.backbone import HeatmapTarget
from ppap.errors import InvalidArgument, InvalidState

DEFAULT_GAMMA = 5e-4
DEFAULT_BETA = 1e-5


@dataclass
class LossBreakdown:
    pred: torch.Tensor
    spatial: torch.Tensor
    feature: torch.Tensor
    prompt: torch.Tensor
    total: torch.Tensor
    gamma: float
    beta: float

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def masked_mse(pred: torch.Tensor, target: HeatmapTarget) -> torch.Tensor:
    """Mean squared error over visible channels and all their pixels."""
    if pred.shape != target.heatmaps.shape:
        raise InvalidArgument(f"prediction {tuple(pred.shape)} vs target {tuple(target.heatmaps.shape)}")
    w = target.weights.to(pred.dtype)
    n_visible = w.sum()
    if n_visible == 0:
        warnings.warn("no visible keypoints; heatmap loss is 0", RuntimeWarning, stacklevel=3)
        return (pred * 0.0).sum()
    sq = ((pred - target.heatmaps.to(pred.dtype)) ** 2).mean(dim=(-1, -2))
    return (sq * w).sum() / n_visible


def spatial_loss(score: torch.Tensor, target: HeatmapTarget) -> torch.Tensor:
    """Bilinear x2 upsample of the score map, then masked MSE against the target."""
    lead = score.shape[:-2]
    up = F.interpolate(score.reshape(-1, 1, *score.shape[-2:]), scale_factor=2,
                       mode="bilinear", align_corners=False)
    return masked_mse(up.reshape(*lead, *up.shape[-2:]), target)


def pred_loss(heatmaps: torch.Tensor, target: HeatmapTarget) -> torch.Tensor:
    return masked_mse(heatmaps, target)


def sample_keypoint_features(pix: torch.Tensor, grid: tuple[int, int], keypoints: torch.Tensor,
                             stride: float) -> torch.Tensor:
    """Bilinearly sample ``(HW, C)`` pixel embeddings at pixel-space keypoints -> ``(K, C)``."""
    h, w = grid
    fmap = pix.transpose(0, 1).reshape(1, -1, h, w)
    u = keypoints[:, 0].to(pix.dtype) / stride
    v = keypoints[:, 1].to(pix.dtype) / stride
    gx = 2.0 * u / max(w - 1, 1) - 1.0
    gy = 2.0 * v / max(h - 1, 1) - 1.0
    loc = torch.stack([gx, gy], dim=-1).reshape(1, 1, -1, 2)
    out = F.grid_sample(fmap, loc, mode="bilinear", padding_mode="border", align_corners=True)
    return out.reshape(-1, keypoints.shape[0]).transpose(0, 1)


def feature_loss(pix: torch.Tensor, prompt_embed: torch.Tensor, keypoints: torch.Tensor,
                 temperature, grid: tuple[int, int], stride: float) -> torch.Tensor:
    """Symmetric cross-entropy between keypoint-location features and prompts.

    Single instance: ``pix`` is ``(HW, C)``, ``prompt_embed`` ``(K, C)``,
    ``keypoints`` ``(K, 3)`` in input pixels. Invisible keypoints are dropped
    from both sides before the softmax.
    """
    visible = keypoints[:, 2] > 0
    n = int(visible.sum())
    if n == 0:
        raise InvalidState("feature loss needs at least one visible keypoint")
    feats = sample_keypoint_features(pix, grid, keypoints[visible], stride)
    feats = F.normalize(feats, dim=-1, eps=1e-12)
    prompts = F.normalize(prompt_embed[visible], dim=-1, eps=1e-12)
    m = temperature * feats @ prompts.transpose(0, 1)
    labels = torch.arange(n, device=m.device)
    return 0.5 * (F.cross_entropy(m, labels) + F.cross_entropy(m.transpose(0, 1), labels))


def total_loss(pred, spatial, feature, prompt, gamma: float = DEFAULT_GAMMA,
               beta: float = DEFAULT_BETA) -> LossBreakdown:
    parts = {"pred": pred, "spatial": spatial, "feature": feature, "prompt": prompt}
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise InvalidState(f"non-finite {name} loss: {v}")
    total = pred + spatial + gamma * feature + beta * prompt
    return LossBreakdown(total=total, gamma=gamma, beta=beta, **parts)
