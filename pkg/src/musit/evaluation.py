"""Desk-scale evaluation: Frechet audio distance, description-audio alignment,
lyric structure score and a paired sign test."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import stats

from .encoder import DualEncoder
from .lyrics import StructuredLyrics, validate_structure

EIG_FLOOR = -1e-8


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    cov: np.ndarray
    diagonal: bool = False


def gaussian_stats(x, diagonal: bool = False) -> GaussianStats:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise EvalError("embedding set is empty")
    mu = x.mean(0)
    if len(x) < 2:
        cov = np.zeros((x.shape[1], x.shape[1]))
    else:
        cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    if diagonal:
        cov = np.diag(np.diag(cov))
    return GaussianStats(mu, 0.5 * (cov + cov.T), diagonal)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.where(w < EIG_FLOOR, EIG_FLOOR, w)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at 0.

    tr((S_a S_b)^(1/2)) is taken as tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), whose
    argument is symmetric PSD, so an eigendecomposition gives the root.
    """
    ra = _psd_sqrt(a.cov)
    cross = np.trace(_psd_sqrt(ra @ b.cov @ ra))
    d = float(np.sum((a.mu - b.mu) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(d, 0.0)


def fad(a, b, return_info: bool = False):
    """Frechet distance between Gaussians fitted to two embedding sets.

    Sets with fewer than d + 1 items fall back to diagonal covariances.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EvalError("embedding set is empty")
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise EvalError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    diagonal = min(len(a), len(b)) < d + 1
    value = frechet_distance(gaussian_stats(a, diagonal), gaussian_stats(b, diagonal))
    if return_info:
        return value, {"diagonal_fallback": diagonal, "n_a": len(a), "n_b": len(b), "dim": d}
    return value


@torch.no_grad()
def alignment_score(description: str, mel, encoder: DualEncoder) -> float:
    """Cosine between the description and audio embeddings (both unit norm)."""
    if not description.strip():
        raise EvalError("empty description")
    if np.asarray(mel).shape[0] == 0:
        raise EvalError("empty mel spectrogram")
    t = encoder.encode_text(description)
    a = encoder.encode_audio(mel)
    return float(torch.clamp(t @ a, -1.0, 1.0))


def structure_score(lyrics: StructuredLyrics) -> float:
    return validate_structure(lyrics).score


def sign_test(matched, shuffled) -> dict:
    """One-sided paired sign test that matched > shuffled; ties are dropped."""
    diff = np.asarray(matched, dtype=np.float64) - np.asarray(shuffled, dtype=np.float64)
    wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
    n = wins + losses
    p = float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0
    return {"wins": wins, "losses": losses, "ties": int(len(diff) - n), "p_value": p}


@dataclass
class MetricsReport:
    fad: float
    alignment_mean_matched: float
    alignment_mean_shuffled: float
    structure_mean: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)
