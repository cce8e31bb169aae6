"""Report figures rendered to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata so repeated renders are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss(logs: dict[str, Sequence[float]], path: str | Path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, losses in logs.items():
        y = np.asarray(losses, dtype=float)
        ax.plot(np.arange(len(y)), y, lw=0.6, alpha=0.4)
        k = max(1, len(y) // 50)
        if len(y) >= k:
            smooth = np.convolve(y, np.ones(k) / k, mode="valid")
            ax.plot(np.arange(k - 1, len(y)), smooth, lw=1.5, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    if logs:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_mel(mel: np.ndarray, path: str | Path, title: str = "", rate: int = 16000, hop: int = 256) -> Path:
    mel = np.asarray(mel)
    fig, ax = plt.subplots(figsize=(7, 3))
    extent = (0, mel.shape[0] * hop / rate, 0, mel.shape[1])
    im = ax.imshow(mel.T, origin="lower", aspect="auto", extent=extent, cmap="magma")
    fig.colorbar(im, ax=ax, label="log amplitude")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_alignment(matched: Sequence[float], shuffled: Sequence[float], path: str | Path,
                   p_value: float | None = None) -> Path:
    matched, shuffled = np.asarray(matched), np.asarray(shuffled)
    fig, ax = plt.subplots(figsize=(4, 4))
    lo = min(matched.min(), shuffled.min(), 0.0) - 0.05
    hi = max(matched.max(), shuffled.max()) + 0.05
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.scatter(shuffled, matched, s=18)
    ax.set_xlabel("shuffled description score")
    ax.set_ylabel("matched description score")
    if p_value is not None:
        ax.set_title(f"sign test p = {p_value:.3g}")
    fig.tight_layout()
    return _save(fig, path)
