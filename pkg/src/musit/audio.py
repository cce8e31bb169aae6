"""Mel analysis, iterative mel inversion, and WAV / PGM / CSV dumps.

Framing rule (no centering): frame ``k`` covers samples ``[k*hop, k*hop + n_fft)``,
so ``frames = 1 + (len - n_fft) // hop``.
"""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MelConfig:
    rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    bins: int = 64
    fmin: float = 30.0
    fmax: float = 8000.0
    floor: float = 1e-5

    def __post_init__(self):
        if self.hop > self.n_fft:
            raise ValueError(f"hop ({self.hop}) must not exceed n_fft ({self.n_fft})")
        if not 0 <= self.fmin < self.fmax <= self.rate / 2:
            raise ValueError(f"need 0 <= fmin < fmax <= rate/2, got {self.fmin}, {self.fmax}")
        if self.bins < 1 or self.hop < 1 or self.floor <= 0:
            raise ValueError("bins and hop must be positive, floor > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    if n_samples < cfg.n_fft:
        raise ValueError(f"signal of {n_samples} samples is shorter than n_fft={cfg.n_fft}")
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.fft.rfft(frames * hann(n_fft), axis=-1)


def istft(spec: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (window-weighted overlap-add)."""
    n_frames = spec.shape[0]
    length = (n_frames - 1) * hop + n_fft
    win = hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * win
    out = np.zeros(length)
    norm = np.zeros(length)
    for k in range(n_frames):
        out[k * hop:k * hop + n_fft] += frames[k]
        norm[k * hop:k * hop + n_fft] += win**2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def band_centers(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.bins + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters (peak 1 at each band center), shape (bins, n_fft//2 + 1)."""
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.bins + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


def mel_forward(w: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Log-amplitude mel spectrogram, shape (frames, bins)."""
    w = np.asarray(w, dtype=np.float64)
    frame_count(len(w), cfg)
    mag = np.abs(stft(w, cfg.n_fft, cfg.hop))
    return np.log(mag @ mel_filterbank(cfg).T + cfg.floor)


def log_mel_error(mel: np.ndarray, target: np.ndarray) -> float:
    """Relative Frobenius error between two log-mel matrices."""
    return float(np.linalg.norm(mel - target) / np.linalg.norm(target))


def mel_to_magnitude(mel: np.ndarray, cfg: MelConfig, iters: int = 100) -> np.ndarray:
    """Non-negative STFT magnitudes whose mel projection approximates ``mel``.

    Multiplicative non-negative least-squares updates, started from the
    coverage-normalized transpose of the filterbank.
    """
    fb = mel_filterbank(cfg)
    amp = np.clip(np.exp(mel) - cfg.floor, 0.0, None)
    target = amp @ fb
    mag = np.maximum(target / np.maximum(fb.sum(0), 1e-8), 1e-12)
    for _ in range(iters):
        mag *= target / ((mag @ fb.T) @ fb + 1e-12)
    return mag


def mel_invert(
    mel: np.ndarray, cfg: MelConfig, iters: int = 64, seed: int = 0,
    momentum: float = 0.99, return_errors: bool = False,
):
    """Waveform whose mel matches ``mel`` by mel-projected Griffin-Lim.

    Each iteration keeps the phase of the current STFT and rescales its
    magnitudes so that every mel band matches the target (geometric mean of
    the per-band log ratios over the bands covering a bin). Momentum follows
    the fast Griffin-Lim update; a step that would raise the log-mel error is
    rejected and retried without momentum, so the error sequence returned
    with ``return_errors`` is non-increasing.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mel = np.asarray(mel, dtype=np.float64)
    fb = mel_filterbank(cfg)
    cover = fb.sum(0)
    log_target = np.log(np.clip(np.exp(mel) - cfg.floor, 0.0, None) + cfg.floor)
    mag = mel_to_magnitude(mel, cfg)
    rng = np.random.default_rng(seed)
    x = istft(mag * np.exp(2j * np.pi * rng.random(mag.shape)), cfg.n_fft, cfg.hop)

    def analyse(sig):
        spec = stft(sig, cfg.n_fft, cfg.hop)
        a = np.abs(spec)
        cur = np.log(a @ fb.T + cfg.floor)
        err = float(np.linalg.norm(cur - mel) / max(np.linalg.norm(mel), 1e-300))
        return spec, a, cur, err

    spec, a, cur, err = analyse(x)
    errors = []
    prev = None
    for _ in range(iters):
        gain = np.exp(((log_target - cur) @ fb) / np.maximum(cover, 1e-9))
        gain[:, cover < 1e-9] = 0.0
        direction = spec if prev is None else spec + momentum * (spec - prev)
        cand = istft(a * gain * np.exp(1j * np.angle(direction)), cfg.n_fft, cfg.hop)
        c_spec, c_a, c_cur, c_err = analyse(cand)
        if c_err > err and prev is not None:
            prev = None
            direction = spec
            cand = istft(a * gain * np.exp(1j * np.angle(direction)), cfg.n_fft, cfg.hop)
            c_spec, c_a, c_cur, c_err = analyse(cand)
        if c_err <= err:
            prev = spec
            x, spec, a, cur, err = cand, c_spec, c_a, c_cur, c_err
        errors.append(err)
    x = np.clip(x, -1.0, 1.0)
    return (x, errors) if return_errors else x


# ---------------------------------------------------------------------------
# file formats


def write_wav(path: str | Path, samples: np.ndarray, rate: int) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono PCM16")
        rate = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


def write_pgm(path: str | Path, mel: np.ndarray) -> None:
    """8-bit PGM, bins as rows (low frequency at the bottom); min/max in a comment."""
    lo, hi = float(mel.min()), float(mel.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((mel.T[::-1] - lo) * scale).astype(np.uint8)
    header = f"P5\n# min={lo!r} max={hi!r}\n{img.shape[1]} {img.shape[0]}\n255\n"
    Path(path).write_bytes(header.encode("ascii") + img.tobytes())


def write_matrix_csv(path: str | Path, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.8g")
