"""Gaussian prompt distributions: decoders, reparameterized sampling and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ppap.errors import InvalidArgument, InvalidState

SIGMA_FLOOR = 1e-4


@dataclass
class PromptDistribution:
    mu: torch.Tensor  # (K, N_p, C)
    sigma: torch.Tensor  # (..., K, N_p, C), > SIGMA_FLOOR


@dataclass
class SampledPrompts:
    z: torch.Tensor  # (..., N_s, K, N_p, C)
    noise: torch.Tensor


def normalized_gram(agnostic: torch.Tensor) -> torch.Tensor:
    """Per-keypoint Gram matrix of L2-normalized attribute rows, ``(K, N_p, N_p)``."""
    norms = agnostic.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise InvalidState("zero-norm attribute embedding; cannot normalize")
    unit = agnostic / norms
    return unit @ unit.transpose(-1, -2)


def diversity_loss(agnostic: torch.Tensor) -> torch.Tensor:
    """Mean over keypoints of ``||G_i - I||_F^2`` with ``G_i`` the normalized Gram."""
    if agnostic.shape[-2] < 1:
        raise InvalidArgument("need at least one attribute per keypoint")
    gram = normalized_gram(agnostic)
    eye = torch.eye(gram.shape[-1], dtype=gram.dtype, device=gram.device)
    return ((gram - eye) ** 2).sum(dim=(-1, -2)).mean()


def _attend(q, k, v):
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return att @ v


class _Decoder(nn.Module):
    def __init__(self, width: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * width
        self.ln_attn = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.ln_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))


class TextDecoder(_Decoder):
    """``mu = MLP(LN(P)) + SA(LN(P))``, attention restricted to one keypoint's attributes."""

    def forward(self, prompts: torch.Tensor) -> torch.Tensor:
        x = self.ln_attn(prompts)
        sa = self.out(_attend(self.q(x), self.k(x), self.v(x)))
        return self.mlp(self.ln_mlp(prompts)) + sa


class VisualTextDecoder(_Decoder):
    """``sigma = floor + softplus(MLP(LN(P)) + CA(LN(P), LN(V)))``.

    ``prompts`` is ``(K, N_p, C)``; ``visual`` is ``(..., HW, C)``. The result
    has shape ``(..., K, N_p, C)``.
    """

    def __init__(self, width: int, hidden: int | None = None):
        super().__init__(width, hidden)
        self.ln_visual = nn.LayerNorm(width)

    def forward(self, prompts: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        k_, n_p, c = prompts.shape
        batch = visual.shape[:-2]
        q = self.q(self.ln_attn(prompts)).reshape(k_ * n_p, c)
        vis = self.ln_visual(visual)
        ca = _attend(q.expand(*batch, k_ * n_p, c), self.k(vis), self.v(vis))
        ca = self.out(ca).reshape(*batch, k_, n_p, c)
        raw = self.mlp(self.ln_mlp(prompts)) + ca
        return SIGMA_FLOOR + F.softplus(raw)


def decode_means(prompts: torch.Tensor, dec: TextDecoder) -> torch.Tensor:
    return dec(prompts)


def decode_variances(prompts: torch.Tensor, visual: torch.Tensor, dec: VisualTextDecoder) -> torch.Tensor:
    return dec(prompts, visual)


def sample_prompts(dist: PromptDistribution, n_samples: int, generator: torch.Generator | None = None,
                   noise: torch.Tensor | None = None) -> SampledPrompts:
    """Reparameterized draw ``z = mu + eps * sigma`` with the sample axis at dim -4.

    Pass ``noise`` to reuse a fixed ``eps`` (e.g. zeros for deterministic
    inference).
    """
    if n_samples < 1:
        raise InvalidArgument("n_samples must be >= 1")
    mu = dist.mu.unsqueeze(-4)
    sigma = dist.sigma.unsqueeze(-4)
    shape = torch.broadcast_shapes(mu.shape, sigma.shape)
    shape = shape[:-4] + (n_samples,) + shape[-3:]
    if noise is None:
        noise = torch.randn(shape, generator=generator, dtype=sigma.dtype, device=sigma.device)
    elif noise.shape != shape:
        raise InvalidArgument(f"noise shape {tuple(noise.shape)} != {tuple(shape)}")
    return SampledPrompts(z=mu + noise * sigma, noise=noise)


def kl_to_standard_normal(dist: PromptDistribution) -> torch.Tensor:
    """Closed-form ``KL(N(mu, sigma^2) || N(0, I))`` summed over the embedding dim."""
    mu, sigma = torch.broadcast_tensors(dist.mu, dist.sigma)
    if (sigma <= 0).any():
        raise InvalidArgument("sigma must be strictly positive")
    var = sigma**2
    return 0.5 * (mu**2 + var - torch.log(var) - 1.0).sum(dim=-1)


def prompt_loss(agnostic: torch.Tensor, dist: PromptDistribution, use_div: bool = True,
                use_kl: bool = True) -> torch.Tensor:
    """Diversity term plus the attribute-averaged KL, averaged over keypoints (and batch)."""
    loss = agnostic.new_zeros(())
    if use_div:
        loss = loss + diversity_loss(agnostic)
    if use_kl:
        loss = loss + kl_to_standard_normal(dist).mean()
    return loss
