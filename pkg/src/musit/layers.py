"""Small transformer building blocks shared by the encoder towers and the backbone.

Attention is written out by hand so that masked weights are exact zeros and
the weight tensor can be inspected.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """(..., dim) cos/sin features of (possibly fractional) positions."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=positions.device) / half
    )
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis; masked keys get weight exactly 0.

    Rows whose keys are all masked return all-zero weights.
    """
    if key_mask is None:
        return torch.softmax(scores, dim=-1)
    scores = scores.masked_fill(~key_mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return torch.nan_to_num(weights, nan=0.0)


class Attention(nn.Module):
    """Multi-head attention; self-attention when ``context`` is omitted."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(context_dim or dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x, context=None, key_mask=None, keep_weights: bool = False):
        b, n, d = x.shape
        context = x if context is None else context
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).chunk(2, dim=-1)
        k = k.view(b, -1, h, d // h).transpose(1, 2)
        v = v.view(b, -1, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        w = masked_softmax(scores, mask)
        if keep_weights:
            self.last_weights = w
        y = (w @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block (self-attention + MLP)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), key_mask=mask)
        return x + self.mlp(self.norm2(x))


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(x.dtype)[..., None]
    return (x * m).sum(1) / m.sum(1).clamp_min(1.0)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1, eps=1e-12)


def masked_randn(shape, mask: torch.Tensor | None, generator: torch.Generator | None = None,
                 dtype=torch.float32) -> torch.Tensor:
    """Standard normal draws of ``shape`` (B, T, ...) placed on valid rows only, in row order.

    Padding rows are zero and adding more padding does not change any draw.
    """
    if mask is None:
        return torch.randn(shape, generator=generator, dtype=dtype)
    out = torch.zeros(shape, dtype=dtype)
    out[mask] = torch.randn((int(mask.sum()), *shape[2:]), generator=generator, dtype=dtype)
    return out
