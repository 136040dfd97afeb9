"""Independent central finite-difference oracle for gradient checks."""

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """d fn(x) / dx for scalar ``fn`` by per-element central differences (no autograd)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Norm-wise relative error ``||a - n|| / ||n||``."""
    num = float(torch.linalg.vector_norm(analytic - numeric))
    den = max(float(torch.linalg.vector_norm(numeric)), 1e-12)
    return num / den


def grad_rel_error(fn, x: torch.Tensor, eps: float = 1e-6) -> float:
    return relative_error(autograd_grad(fn, x), central_difference(fn, x, eps))


def projected(fn, shape_fn=None, seed: int = 0):
    """Turn a tensor-valued ``fn`` into a scalar via a fixed random projection."""
    cache = {}

    def scalar(x):
        y = fn(x)
        if "w" not in cache:
            gen = torch.Generator().manual_seed(seed)
            cache["w"] = torch.randn(y.shape, generator=gen, dtype=torch.float64)
        return (y * cache["w"]).sum()

    return scalar


def rng(seed=0):
    return np.random.default_rng(seed)
