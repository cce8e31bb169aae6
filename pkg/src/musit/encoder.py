"""Contrastive text-audio dual encoder.

Both towers are small pre-norm transformers with masked mean pooling and a
linear projection to a unit-norm embedding. Audio enters as patches of
``patch`` consecutive mel frames; frames beyond the mask are zeroed before
patching, so trailing padding never changes an embedding.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import EncoderBlock, l2_normalize, masked_mean, sinusoidal

PAD, UNK = "<pad>", "<unk>"
LOG_TEMP_MIN, LOG_TEMP_MAX = -5.0, 5.0


class EncoderInputError(ValueError):
    pass


def words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass(frozen=True)
class EncoderConfig:
    vocab: tuple[str, ...] = ()
    bins: int = 64
    width: int = 64
    layers: int = 2
    heads: int = 4
    d_e: int = 64
    patch: int = 4
    min_audio_frames: int = 16
    init_temperature: float = 0.07

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d


class Tower(nn.Module):
    def __init__(self, in_dim: int | None, vocab_size: int | None, cfg: EncoderConfig):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, cfg.width) if vocab_size else nn.Linear(in_dim, cfg.width)
        self.blocks = nn.ModuleList(EncoderBlock(cfg.width, cfg.heads) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.d_e)
        self.width = cfg.width

    def forward(self, x, mask):
        h = self.embed(x)
        pos = sinusoidal(torch.arange(h.shape[1]), self.width).to(h.dtype)
        h = h + pos
        for blk in self.blocks:
            h = blk(h, mask)
        return l2_normalize(self.proj(self.norm(masked_mean(h, mask))))


class DualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = (PAD, UNK) + tuple(cfg.vocab)
        self._index = {w: i for i, w in enumerate(self.vocab)}
        self.text = Tower(None, len(self.vocab), cfg)
        self.audio = Tower(cfg.patch * cfg.bins, None, cfg)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(cfg.init_temperature)))
        self.register_buffer("mel_mean", torch.zeros(()))
        self.register_buffer("mel_std", torch.ones(()))

    def fit_normalization(self, mels) -> None:
        values = np.concatenate([np.asarray(m).ravel() for m in mels])
        self.mel_mean.fill_(float(values.mean()))
        self.mel_std.fill_(float(values.std()) or 1.0)

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(self.log_temperature.clamp(LOG_TEMP_MIN, LOG_TEMP_MAX))

    def token_ids(self, text: str) -> list[int]:
        return [self._index.get(w, 1) for w in words(text)]

    # -- batched towers ---------------------------------------------------

    def embed_token_ids(self, batch: Sequence[Sequence[int]]) -> torch.Tensor:
        if any(len(ids) == 0 for ids in batch):
            raise EncoderInputError("empty description after tokenization")
        n = max(len(ids) for ids in batch)
        ids = torch.zeros(len(batch), n, dtype=torch.long)
        mask = torch.zeros(len(batch), n, dtype=torch.bool)
        for i, row in enumerate(batch):
            ids[i, :len(row)] = torch.tensor(list(row), dtype=torch.long)
            mask[i, :len(row)] = True
        return self.text(ids, mask)

    def embed_mels(self, mels: Sequence, frame_counts: Sequence[int] | None = None) -> torch.Tensor:
        """Embed variable-length (F, bins) mels; ``frame_counts`` marks valid frames."""
        dtype = self.log_temperature.dtype
        mels = [torch.as_tensor(m, dtype=dtype) for m in mels]
        counts = list(frame_counts) if frame_counts is not None else [m.shape[0] for m in mels]
        if any(c < 1 for c in counts):
            raise EncoderInputError("mel spectrogram has no frames")
        p = self.cfg.patch
        n_patch = max(math.ceil(m.shape[0] / p) for m in mels)
        x = torch.zeros(len(mels), n_patch * p, self.cfg.bins, dtype=dtype)
        mask = torch.zeros(len(mels), n_patch, dtype=torch.bool)
        for i, (m, c) in enumerate(zip(mels, counts)):
            x[i, :c] = (m[:c] - self.mel_mean) / self.mel_std
            mask[i, :math.ceil(c / p)] = True
        x = x.view(len(mels), n_patch, p * self.cfg.bins)
        return self.audio(x, mask)

    def encode_text(self, description: str) -> torch.Tensor:
        ids = self.token_ids(description)
        if not ids:
            raise EncoderInputError("empty description")
        return self.embed_token_ids([ids])[0]

    def encode_audio(self, mel, frames: int | None = None) -> torch.Tensor:
        return self.embed_mels([mel], None if frames is None else [frames])[0]


# ---------------------------------------------------------------------------
# contrastive objective


def info_nce(text_emb: torch.Tensor, audio_emb: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric cross-entropy over the cosine-similarity matrix / temperature."""
    logits = text_emb @ audio_emb.T / temperature
    target = torch.arange(len(text_emb))
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


@dataclass
class Segments:
    token_spans: list[tuple[int, int]] = field(default_factory=list)
    frame_spans: list[tuple[int, int]] = field(default_factory=list)


def draw_segments(token_counts, frame_counts, min_frames: int, rng: np.random.Generator) -> Segments:
    """Uniform contiguous spans: >= 1 token, >= min(min_frames, available) frames."""
    seg = Segments()
    for n in token_counts:
        length = int(rng.integers(1, n + 1))
        start = int(rng.integers(0, n - length + 1))
        seg.token_spans.append((start, start + length))
    for f in frame_counts:
        lo = min(min_frames, f)
        length = int(rng.integers(lo, f + 1))
        start = int(rng.integers(0, f - length + 1))
        seg.frame_spans.append((start, start + length))
    return seg


def contrastive_loss(texts: Sequence[str], mels: Sequence, enc: DualEncoder,
                     rng: np.random.Generator, segment: bool = True) -> torch.Tensor:
    if len(texts) != len(mels):
        raise EncoderInputError("texts and audios must be aligned pairs")
    if len(texts) < 2:
        raise EncoderInputError("contrastive loss needs at least 2 pairs")
    ids = [enc.token_ids(t) for t in texts]
    if segment:
        seg = draw_segments([len(i) for i in ids], [len(m) for m in mels], enc.cfg.min_audio_frames, rng)
        ids = [i[a:b] for i, (a, b) in zip(ids, seg.token_spans)]
        mels = [m[a:b] for m, (a, b) in zip(mels, seg.frame_spans)]
    t = enc.embed_token_ids(ids)
    a = enc.embed_mels(mels)
    return info_nce(t, a, enc.temperature)


# ---------------------------------------------------------------------------
# description prompt tokens


def delimiter_segments(description: str, max_segments: int) -> list[str]:
    """Inference split: comma / period / semicolon phrases, extra phrases merged into the last."""
    parts = [p.strip() for p in re.split(r"[,.;]", description) if words(p)]
    if not parts:
        raise EncoderInputError("empty description")
    if len(parts) > max_segments:
        parts = parts[:max_segments - 1] + [" ".join(parts[max_segments - 1:])]
    return parts


def random_segments(description: str, max_segments: int, rng: np.random.Generator) -> list[str]:
    """Training split: k ~ U{1..min(max, n_words)} contiguous word groups at random cut points."""
    w = words(description)
    if not w:
        raise EncoderInputError("empty description")
    k = int(rng.integers(1, min(max_segments, len(w)) + 1))
    cuts = sorted(rng.choice(np.arange(1, len(w)), size=k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0] + cuts + [len(w)]
    return [" ".join(w[a:b]) for a, b in zip(bounds, bounds[1:])]


def embed_prompt(description: str, enc: DualEncoder, max_segments: int = 8,
                 rng: np.random.Generator | None = None) -> torch.Tensor:
    """(k, d_e) segment embeddings; random split when ``rng`` is given, else delimiter split."""
    segs = random_segments(description, max_segments, rng) if rng is not None \
        else delimiter_segments(description, max_segments)
    return enc.embed_token_ids([enc.token_ids(s) for s in segs])
