"""Convolutional VAE over log-mel frames.

Frames are grouped into patches of ``r``, so ``T_lat = ceil(frames / r)``;
the decoder emits one patch per row and the output is truncated to the stored frame count.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .layers import masked_randn


class LatentError(ValueError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    bins: int = 64
    d_lat: int = 16
    r: int = 16
    hidden: int = 128
    blocks: int = 2
    logvar_min: float = -10.0
    logvar_max: float = 10.0

    def __post_init__(self):
        if self.r < 1 or self.r & (self.r - 1):
            raise ValueError(f"time downsample factor r must be a power of two, got {self.r}")

    def to_dict(self) -> dict:
        return asdict(self)


def latent_length(frames: int, r: int) -> int:
    return math.ceil(frames / r)


class ResBlock(nn.Module):
    """Pre-norm residual block of two width-3 convolutions over latent rows."""

    def __init__(self, h: int):
        super().__init__()
        self.norm = nn.LayerNorm(h)
        self.conv1 = nn.Conv1d(h, h, 3, padding=1)
        self.conv2 = nn.Conv1d(h, h, 3, padding=1)

    def forward(self, h, keep):
        # h: (B, T, hidden); keep zeroes padded rows so the convs see the same
        # zero border an unpadded item would
        y = keep(nn.functional.gelu(self.norm(h))).transpose(1, 2)
        y = keep(nn.functional.gelu(self.conv1(y)).transpose(1, 2)).transpose(1, 2)
        return h + keep(self.conv2(y).transpose(1, 2))


class MelVAE(nn.Module):
    """Each latent row owns a patch of ``r`` frames; residual convolutions mix
    neighbouring rows on both sides of the bottleneck."""

    def __init__(self, cfg: VaeConfig = VaeConfig()):
        super().__init__()
        self.cfg = cfg
        h, patch = cfg.hidden, cfg.r * cfg.bins
        self.enc_in = nn.Linear(patch, h)
        self.enc_blocks = nn.ModuleList(ResBlock(h) for _ in range(cfg.blocks))
        self.enc_out = nn.Linear(h, 2 * cfg.d_lat)
        self.dec_in = nn.Linear(cfg.d_lat, h)
        self.dec_blocks = nn.ModuleList(ResBlock(h) for _ in range(cfg.blocks))
        self.dec_out = nn.Linear(h, patch)
        # log-mel normalization, fitted on the training corpus
        self.register_buffer("mel_mean", torch.zeros(()))
        self.register_buffer("mel_std", torch.ones(()))

    def fit_normalization(self, mels) -> None:
        values = np.concatenate([np.asarray(m).ravel() for m in mels])
        self.mel_mean.fill_(float(values.mean()))
        self.mel_std.fill_(float(values.std()) or 1.0)

    @staticmethod
    def _trunk(h, blocks, mask):
        keep = (lambda x: x) if mask is None else (lambda x: x * mask[..., None].to(x.dtype))
        h = keep(h)
        for blk in blocks:
            h = blk(h, keep)
        return h

    def encode(self, mel: torch.Tensor, frame_mask: torch.Tensor | None = None):
        """(B, F, bins) log-mel -> mean, logvar of shape (B, ceil(F/r), d_lat).

        With ``frame_mask``, every item is processed as if it were alone at its
        own length; rows past an item's latent length come out exactly zero.
        """
        if not torch.isfinite(mel).all():
            raise LatentError("mel spectrogram contains non-finite values")
        b, f, bins = mel.shape
        r = self.cfg.r
        t_lat = latent_length(f, r)
        x = (mel - self.mel_mean) / self.mel_std
        lat_mask = None
        if frame_mask is not None:
            x = x * frame_mask[..., None].to(x.dtype)
            lat_mask = latent_mask(frame_mask, r, t_lat)
        x = nn.functional.pad(x, (0, 0, 0, t_lat * r - f)).reshape(b, t_lat, r * bins)
        h = self._trunk(self.enc_in(x), self.enc_blocks, lat_mask)
        h = self.enc_out(nn.functional.gelu(h))
        if lat_mask is not None:
            h = h * lat_mask[..., None].to(h.dtype)
        mean, logvar = h.chunk(2, dim=-1)
        logvar = logvar.clamp(self.cfg.logvar_min, self.cfg.logvar_max)
        return mean, logvar

    def decode(self, z: torch.Tensor, frames: int, latent_mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T_lat, d_lat) -> (B, frames, bins) log-mel."""
        if not torch.isfinite(z).all():
            raise LatentError("latent contains non-finite values")
        if frames > z.shape[1] * self.cfg.r:
            raise LatentError(f"{frames} frames cannot come from {z.shape[1]} latent rows (r={self.cfg.r})")
        b, t_lat, _ = z.shape
        h = self._trunk(self.dec_in(z), self.dec_blocks, latent_mask)
        y = self.dec_out(nn.functional.gelu(h)).reshape(b, t_lat * self.cfg.r, self.cfg.bins)[:, :frames]
        return y * self.mel_std + self.mel_mean


def latent_mask(frame_mask: torch.Tensor, r: int, t_lat: int | None = None) -> torch.Tensor:
    """Valid latent rows for each item of a (B, F) frame mask."""
    n = frame_mask.sum(1)
    t_lat = t_lat or latent_length(frame_mask.shape[1], r)
    return torch.arange(t_lat)[None, :] < ((n + r - 1) // r)[:, None]


def reparameterize(mean, logvar, generator: torch.Generator | None = None, mask=None):
    xi = masked_randn(mean.shape, mask, generator, mean.dtype)
    return mean + torch.exp(0.5 * logvar) * xi


def vae_encode(mel, vae: MelVAE, generator: torch.Generator | None = None):
    """Return (mean, logvar, sample) for one (F, bins) mel or a (B, F, bins) batch."""
    single = mel.dim() == 2
    mel = mel[None] if single else mel
    mean, logvar = vae.encode(mel)
    sample = reparameterize(mean, logvar, generator)
    if single:
        return mean[0], logvar[0], sample[0]
    return mean, logvar, sample


def vae_decode(z, vae: MelVAE, frames: int):
    single = z.dim() == 2
    out = vae.decode(z[None] if single else z, frames)
    return out[0] if single else out


def kl_divergence(mean, logvar, mask=None):
    """Half the mean of exp(logvar) + mean^2 - 1 - logvar over valid latent entries."""
    term = torch.exp(logvar) + mean**2 - 1.0 - logvar
    if mask is None:
        return 0.5 * term.mean()
    m = mask.to(term.dtype)[..., None].expand_as(term)
    return 0.5 * (term * m).sum() / m.sum()


def vae_loss(mel, vae: MelVAE, beta_kl: float = 1e-2, generator=None, frame_mask=None):
    """(total, recon, kl) for a (B, F, bins) batch; ``frame_mask`` marks real frames."""
    if beta_kl < 0:
        raise ValueError("beta_kl must be non-negative")
    mean, logvar = vae.encode(mel, frame_mask)
    if frame_mask is None:
        z = reparameterize(mean, logvar, generator)
        recon_mel = vae.decode(z, mel.shape[1])
        recon = ((recon_mel - mel) ** 2).mean()
        kl = kl_divergence(mean, logvar)
    else:
        lat_mask = latent_mask(frame_mask, vae.cfg.r, mean.shape[1])
        z = reparameterize(mean, logvar, generator, lat_mask)
        recon_mel = vae.decode(z, mel.shape[1], lat_mask)
        fm = frame_mask.to(mel.dtype)[..., None]
        recon = (((recon_mel - mel) ** 2) * fm).sum() / (fm.sum() * mel.shape[-1])
        kl = kl_divergence(mean, logvar, lat_mask)
    return recon + beta_kl * kl, recon, kl
