"""Central finite-difference gradient checks for float64 modules."""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn


def randomize(module: nn.Module, seed: int = 0, std: float = 0.3) -> nn.Module:
    """Overwrite every parameter with N(0, std^2) draws so no gradient is trivially zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
    return module


def check_gradients(module: nn.Module, loss_fn: Callable[[], torch.Tensor], eps: float = 1e-6) -> dict[str, float]:
    """Per-parameter relative error ||g - g_fd|| / max(||g|| + ||g_fd||, 1e-12).

    ``loss_fn`` must be deterministic (fixed random draws) and return a scalar.
    """
    module.zero_grad()
    loss_fn().backward()
    errors = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = loss_fn().item()
                flat[k] = orig - eps
                down = loss_fn().item()
                flat[k] = orig
                fd_flat[k] = (up - down) / (2 * eps)
            denom = max(float(analytic.norm() + fd.norm()), 1e-12)
            errors[name] = float((analytic - fd).norm()) / denom
    return errors
