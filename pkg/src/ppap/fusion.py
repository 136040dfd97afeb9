"""Score maps from sampled prompts and the three N_s -> 1 fusion strategies.

Stacks are laid out ``(..., N_s, K, H, W)``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ppap.errors import InvalidArgument

STRATEGIES = ("heuristic", "ensemble", "attention")


def score_maps(z: torch.Tensor, pix: torch.Tensor, temperature, grid: tuple[int, int]) -> torch.Tensor:
    """Scaled cosine between attribute-averaged prompts and pixel embeddings.

    Args:
        z: ``(..., N_s, K, N_p, C)`` sampled prompts.
        pix: ``(..., HW, C)`` unit-norm pixel embeddings.
        temperature: scalar multiplier.
        grid: ``(H, W)`` with ``H * W == HW``.
    """
    if z.shape[-1] != pix.shape[-1]:
        raise InvalidArgument(f"prompt dim {z.shape[-1]} != pixel dim {pix.shape[-1]}")
    h, w = grid
    if h * w != pix.shape[-2]:
        raise InvalidArgument(f"grid {grid} does not match {pix.shape[-2]} pixels")
    prompt = F.normalize(z.mean(dim=-2), dim=-1)  # (..., N_s, K, C)
    s = torch.einsum("...nkc,...pc->...nkp", prompt, pix)
    return (temperature * s).reshape(*s.shape[:-1], h, w)


def _resize_like(target: torch.Tensor, hw) -> torch.Tensor:
    if tuple(target.shape[-2:]) == tuple(hw):
        return target
    lead = target.shape[:-2]
    t = target.reshape(-1, 1, *target.shape[-2:])
    t = F.interpolate(t, size=tuple(hw), mode="bilinear", align_corners=False)
    return t.reshape(*lead, *hw)


def heuristic_selection(stack: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Index of the sample closest (MSE) to the target, per keypoint: ``(..., K)``."""
    target = _resize_like(target, stack.shape[-2:]).to(stack.dtype)
    mse = ((stack - target.unsqueeze(-4)) ** 2).mean(dim=(-1, -2))  # (..., N_s, K)
    return mse.argmin(dim=-2)


def fuse_heuristic(stack: torch.Tensor, target: torch.Tensor | None = None) -> torch.Tensor:
    """Training (target given): pick the best-matching sample per keypoint.
    Evaluation (no target): average the samples."""
    if target is None:
        return stack.mean(dim=-4)
    pick = heuristic_selection(stack, target)
    idx = pick[..., None, :, None, None].expand(*stack.shape[:-4], 1, *stack.shape[-3:])
    return stack.gather(-4, idx).squeeze(-4)


class EnsembleFusion(nn.Module):
    """Grouped 1x1 conv: keypoint ``i`` sees only its own ``N_s`` maps."""

    def __init__(self, num_keypoints: int, n_samples: int):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.n_samples = n_samples
        self.conv = nn.Conv2d(n_samples * num_keypoints, num_keypoints, 1, groups=num_keypoints)
        with torch.no_grad():
            self.conv.weight.fill_(1.0 / n_samples)
            self.conv.bias.zero_()

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        n_s, k = stack.shape[-4], stack.shape[-3]
        if n_s * k != self.conv.in_channels or k != self.num_keypoints:
            raise InvalidArgument(
                f"stack has {n_s}x{k} channels, fusion expects {self.n_samples}x{self.num_keypoints}"
            )
        lead = stack.shape[:-4]
        h, w = stack.shape[-2:]
        # keypoint-major channel order so each conv group holds one keypoint
        x = stack.transpose(-4, -3).reshape(-1, k * n_s, h, w)
        return self.conv(x).reshape(*lead, k, h, w)


def fuse_ensemble(stack: torch.Tensor, state: EnsembleFusion) -> torch.Tensor:
    return state(stack)


class _AttentionLayer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_a = nn.Linear(dim, dim, bias=False)

    def forward(self, query, samples):
        # query (..., K, 1, HW); samples (..., K, N_s, HW)
        q = self.w_q(query)
        att = torch.softmax(q @ self.w_k(samples).transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return q + self.w_a(att @ self.w_v(samples)), att


class AttentionFusion(nn.Module):
    """Global learnable per-keypoint query attending over the sampled maps."""

    def __init__(self, num_keypoints: int, grid: tuple[int, int], n_layers: int = 2):
        super().__init__()
        if n_layers < 1:
            raise InvalidArgument("attention fusion needs at least one layer")
        self.grid = tuple(grid)
        hw = grid[0] * grid[1]
        self.query = nn.Parameter(torch.randn(num_keypoints, hw) * 0.02)
        self.layers = nn.ModuleList([_AttentionLayer(hw) for _ in range(n_layers)])

    def forward(self, stack: torch.Tensor, return_weights: bool = False):
        h, w = stack.shape[-2:]
        if h * w != self.query.shape[-1]:
            raise InvalidArgument(f"score grid {h}x{w} does not match query size {self.query.shape[-1]}")
        samples = stack.flatten(-2).transpose(-3, -2)  # (..., K, N_s, HW)
        out = self.query.unsqueeze(-2).expand(*samples.shape[:-2], 1, h * w).to(stack.dtype)
        weights = []
        for layer in self.layers:
            out, att = layer(out, samples)
            weights.append(att)
        fused = out.squeeze(-2).reshape(*stack.shape[:-4], stack.shape[-3], h, w)
        return (fused, weights) if return_weights else fused


def fuse_attention(stack: torch.Tensor, state: AttentionFusion) -> torch.Tensor:
    return state(stack)


def build_fusion(strategy: str, num_keypoints: int, n_samples: int, grid, attention_layers: int = 2):
    """Module for learnable strategies, ``None`` for the parameter-free heuristic."""
    if strategy == "heuristic":
        return None
    if strategy == "ensemble":
        return EnsembleFusion(num_keypoints, n_samples)
    if strategy == "attention":
        return AttentionFusion(num_keypoints, grid, attention_layers)
    raise InvalidArgument(f"unknown fusion strategy {strategy!r}; choose from {STRATEGIES}")
