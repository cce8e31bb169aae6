"""Diffusion / interpolant transformer trunk.

Sequence layout for self-attention: ``[description tokens ++ latent rows]``.
Each layer runs self-attention, cross-attention to the embedded lyric tokens,
then an MLP; latent rows are modulated by adaptive layer norm (shift, scale,
gate) computed from the time embedding, description rows are not.
Only latent positions are returned.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .layers import Attention, FeedForward, sinusoidal


class BackboneInputError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_lat: int = 16
    d_e: int = 64
    max_latent_len: int = 256
    max_prompt_tokens: int = 8
    lyric_vocab_size: int = 600
    prediction_target: str = "epsilon"
    time_freq_dim: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_layers", "n_heads", "d_lat", "d_e", "max_latent_len",
                     "max_prompt_tokens", "lyric_vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.prediction_target not in ("epsilon", "velocity"):
            raise ValueError(f"prediction_target must be epsilon or velocity, got {self.prediction_target}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Condition:
    """Everything the trunk sees besides the noised latent and the time.

    Shapes: ``latent_mask`` (B, T); ``prompt_tokens`` (B, P, d_e) with
    ``prompt_token_mask`` (B, P), or None for the learned null token;
    ``lyrics`` (B, L) ids with ``lyric_mask``; ``prompt_region`` (B, T) marks
    latent rows clamped to ``prompt_latent`` (B, T, d_lat).
    """

    latent_mask: torch.Tensor
    d_lat: int
    prompt_tokens: torch.Tensor | None = None
    prompt_token_mask: torch.Tensor | None = None
    lyrics: torch.Tensor | None = None
    lyric_mask: torch.Tensor | None = None
    prompt_region: torch.Tensor | None = None
    prompt_latent: torch.Tensor | None = None
    dtype: torch.dtype = torch.float32

    @property
    def shape(self) -> tuple[int, int, int]:
        b, t = self.latent_mask.shape
        return b, t, self.d_lat

    @property
    def target_mask(self) -> torch.Tensor:
        """Rows that are generated and scored: valid and outside the prompt region."""
        if self.prompt_region is None:
            return self.latent_mask
        return self.latent_mask & ~self.prompt_region

    def clamp(self, x: torch.Tensor) -> torch.Tensor:
        """Zero padding rows and restore prompt-region rows."""
        x = x * self.latent_mask[..., None].to(x.dtype)
        if self.prompt_region is not None:
            x = torch.where(self.prompt_region[..., None], self.prompt_latent.to(x.dtype), x)
        return x


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class TimeEmbedding(nn.Module):
    def __init__(self, d_model: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, d_model), nn.SiLU(), nn.Linear(d_model, d_model))

    def forward(self, t):
        # t in [0, 1]; scaled so the sinusoid periods resolve 1000 discrete steps
        return self.mlp(sinusoidal(t * 1000.0, self.freq_dim).to(self.mlp[0].weight.dtype))


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.cross = Attention(d, heads)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = FeedForward(d)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 9 * d))

    def forward(self, x, c, n_prompt, self_mask, lyr, lyr_mask, keep_weights=False):
        # per-row modulation: description rows get shift=scale=0, gate=1
        mods = self.ada(c)[:, None, :].expand(-1, x.shape[1], -1)
        row_is_latent = torch.arange(x.shape[1]) >= n_prompt
        ident = torch.cat([torch.zeros_like(c).repeat(1, 2), torch.ones_like(c)], dim=-1)
        ident = ident.repeat(1, 3)[:, None, :].expand_as(mods)
        mods = torch.where(row_is_latent[None, :, None], mods, ident)
        s1, sc1, g1, s2, sc2, g2, s3, sc3, g3 = mods.chunk(9, dim=-1)
        x = x + g1 * self.attn(modulate(self.norm1(x), s1, sc1), key_mask=self_mask,
                               keep_weights=keep_weights)
        if lyr is not None:
            x = x + g2 * self.cross(modulate(self.norm2(x), s2, sc2), context=lyr, key_mask=lyr_mask,
                                    keep_weights=keep_weights)
        return x + g3 * self.mlp(modulate(self.norm3(x), s3, sc3))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.x_in = nn.Linear(cfg.d_lat, d)
        self.prompt_proj = nn.Linear(cfg.d_e, d)
        self.null_prompt = nn.Parameter(torch.zeros(1, d))
        self.prompt_region_embed = nn.Parameter(torch.zeros(d))
        self.lyric_embed = nn.Embedding(cfg.lyric_vocab_size, d)
        self.time = TimeEmbedding(d, cfg.time_freq_dim)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.head = nn.Linear(d, cfg.d_lat)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Condition, keep_weights: bool = False):
        b, T, d_lat = x.shape
        cfg = self.cfg
        if d_lat != cfg.d_lat or cond.latent_mask.shape != (b, T):
            raise BackboneInputError(f"latent shape {tuple(x.shape)} does not match config/mask")
        if T > cfg.max_latent_len:
            raise BackboneInputError(f"latent length {T} exceeds max_latent_len {cfg.max_latent_len}")
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b)
        if ((t < 0) | (t > 1)).any():
            raise BackboneInputError("time must lie in [0, 1]")
        if not cond.target_mask.any(dim=1).all():
            raise BackboneInputError("empty target region")

        h = self.x_in(x)
        if cond.prompt_region is not None:
            h = h + cond.prompt_region[..., None].to(h.dtype) * self.prompt_region_embed
        h = h + sinusoidal(torch.arange(T), cfg.d_model).to(h.dtype)

        if cond.prompt_tokens is None:
            prompt = self.null_prompt.expand(b, 1, -1)
            pmask = torch.ones(b, 1, dtype=torch.bool)
        else:
            if cond.prompt_tokens.shape[1] > cfg.max_prompt_tokens:
                raise BackboneInputError("too many description tokens")
            prompt = self.prompt_proj(cond.prompt_tokens.to(h.dtype))
            pmask = cond.prompt_token_mask
            if pmask is None:
                pmask = torch.ones(prompt.shape[:2], dtype=torch.bool)
        n_prompt = prompt.shape[1]
        seq = torch.cat([prompt, h], dim=1)
        self_mask = torch.cat([pmask, cond.latent_mask], dim=1)

        lyr = lyr_mask = None
        if cond.lyrics is not None:
            lyr = self.lyric_embed(cond.lyrics)
            lyr = lyr + sinusoidal(torch.arange(lyr.shape[1]), cfg.d_model).to(lyr.dtype)
            lyr_mask = cond.lyric_mask if cond.lyric_mask is not None else cond.lyrics != 0

        c = self.time(t)
        for blk in self.blocks:
            seq = blk(seq, c, n_prompt, self_mask, lyr, lyr_mask, keep_weights)
        out = seq[:, n_prompt:]
        shift, scale = self.final_ada(c)[:, None, :].chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(out), shift, scale))
        return out * cond.latent_mask[..., None].to(out.dtype)


def init_params(cfg: BackboneConfig, seed: int) -> Backbone:
    """Scaled-normal weights (std 0.02 embeddings, fan-in scaled linears), zero biases,
    zero adaptive-norm projections (gates start closed) and a zero output head."""
    gen = torch.Generator().manual_seed(int(seed))
    model = Backbone(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 2 and "embed" not in name:
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[1]))
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
        for blk in model.blocks:
            blk.ada[1].weight.zero_()
            blk.ada[1].bias.zero_()
        model.final_ada[1].weight.zero_()
        model.final_ada[1].bias.zero_()
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model
