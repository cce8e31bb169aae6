"""Deterministic toy-song corpus: mixed audio, four stems, lyrics, and paired
professional / amateur descriptions.

Rendering recipe (all at ``rate`` Hz, mono):

* chords: diatonic triads of the song's mode voiced with the timbre recipe's
  harmonic series. Progression and register depend on the section.
* bass: root of the current chord two octaves down, pure sine with a pluck
  envelope, absent from intros.
* drums: noise bursts on the beat grid; a low-passed "kick" and a high-passed
  "hat" whose density depends on the section, over a continuous noise bed
  about 50 dB below full scale.
* vocal: one syllable per beat following the lyric grid; a harmonic tone whose
  partials are weighted by a vowel formant envelope picked from the final.

Section signatures::

    intro   I chord sustained, soft, no drums, no bass, no vocal
    verse   I-vi-IV-V low register, kick on 1 and 3, hats on off-beats
    chorus  IV-V-I-I one octave up, louder, kick every beat plus hats
    bridge  vi-IV-ii-V, kick on 1 only, hats on every beat
    outro   I chord with a linear fade, no drums
"""

from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from . import audio
from .lyrics import (
    PinyinTable,
    RhymeClassTable,
    SectionTag,
    StructuredLyrics,
    generate_lyrics,
    serialize,
    to_pinyin,
)

STEM_NAMES = ("vocal", "drums", "chords", "bass")
MASK64 = (1 << 64) - 1


class SpecError(ValueError):
    pass


class Mode(str, enum.Enum):
    MAJOR = "major"
    MINOR = "minor"


@dataclass(frozen=True)
class CorpusConfig:
    rate: int = 16000
    max_duration: float = 16.0
    line_length: int = 4


# harmonic amplitude recipes, indexed by timbre_id
TIMBRES: tuple[tuple[float, ...], ...] = (
    (1.0, 0.15, 0.05),                                  # 0: sine-like pad
    tuple(1.0 / k for k in range(1, 9)),                # 1: sawtooth lead
    (1.0, 0.0, 1 / 3, 0.0, 1 / 5, 0.0, 1 / 7),          # 2: square organ
    (1.0, 0.0, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0, 0.4),      # 3: bell
)

TEMPO_BANDS = ("slow", "medium", "fast")

PRO_TERMS = {
    "tempo": {"slow": "adagio tempo", "medium": "moderato tempo", "fast": "allegro tempo"},
    "mode": {Mode.MAJOR: "major tonality", Mode.MINOR: "minor tonality"},
    "timbre": ("sine pad timbre", "sawtooth lead timbre", "square organ timbre", "bell harmonics timbre"),
}
AMATEUR_TERMS = {
    "tempo": {"slow": "lazy chill vibe", "medium": "easy walking groove", "fast": "super energetic beat"},
    "mode": {Mode.MAJOR: "happy sunny feeling", Mode.MINOR: "sad rainy mood"},
    "timbre": ("soft smooth sound", "buzzy sharp noise", "hollow retro tone", "sparkly shiny ring"),
}

# bar counts chosen so every template fits 16 s at some tempo in [60, 180]
TEMPLATES: tuple[tuple[tuple[SectionTag, int], ...], ...] = (
    ((SectionTag.INTRO, 1), (SectionTag.VERSE, 1), (SectionTag.CHORUS, 1), (SectionTag.OUTRO, 1)),
    ((SectionTag.VERSE, 1), (SectionTag.CHORUS, 1), (SectionTag.BRIDGE, 1), (SectionTag.CHORUS, 1)),
    ((SectionTag.INTRO, 1), (SectionTag.VERSE, 2), (SectionTag.CHORUS, 2)),
    ((SectionTag.VERSE, 2), (SectionTag.CHORUS, 2), (SectionTag.BRIDGE, 1), (SectionTag.CHORUS, 1)),
    ((SectionTag.VERSE, 1), (SectionTag.CHORUS, 1), (SectionTag.VERSE, 1), (SectionTag.CHORUS, 1),
     (SectionTag.OUTRO, 1)),
)


@dataclass(frozen=True)
class SongSpec:
    tempo_bpm: int
    mode: Mode
    sections: tuple[tuple[SectionTag, int], ...]
    timbre_id: int
    seed: int

    @property
    def total_bars(self) -> int:
        return sum(b for _, b in self.sections)

    @property
    def duration(self) -> float:
        return self.total_bars * 4 * 60.0 / self.tempo_bpm

    def validate(self, cfg: CorpusConfig = CorpusConfig()) -> "SongSpec":
        if not 60 <= self.tempo_bpm <= 180:
            raise SpecError(f"tempo_bpm must be in [60, 180], got {self.tempo_bpm}")
        if not self.sections:
            raise SpecError("at least one section is required")
        for tag, bars in self.sections:
            SectionTag(tag)
            if bars < 1:
                raise SpecError(f"bar_count must be >= 1, got {bars} for {tag}")
        if not 0 <= self.timbre_id < len(TIMBRES):
            raise SpecError(f"timbre_id must be in [0, {len(TIMBRES)}), got {self.timbre_id}")
        if not 0 <= self.seed <= MASK64:
            raise SpecError("seed must be a 64-bit unsigned integer")
        if self.duration > cfg.max_duration + 1e-9:
            raise SpecError(
                f"duration {self.duration:.3f} s exceeds max duration {cfg.max_duration} s"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "tempo_bpm": self.tempo_bpm,
            "mode": Mode(self.mode).value,
            "sections": [[SectionTag(t).value, b] for t, b in self.sections],
            "timbre_id": self.timbre_id,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SongSpec":
        return cls(
            int(d["tempo_bpm"]),
            Mode(d["mode"]),
            tuple((SectionTag(t), int(b)) for t, b in d["sections"]),
            int(d["timbre_id"]),
            int(d["seed"]),
        )


@dataclass
class CorpusEntry:
    id: str
    waveform: np.ndarray
    stems: dict[str, np.ndarray]
    lyrics: StructuredLyrics
    description_pro: str
    description_am: str
    spec: SongSpec
    rate: int = 16000
    rhyme_class: int = field(default=0)


# ---------------------------------------------------------------------------
# seeding


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer (Steele, Lea & Flood)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-entry seed: ``splitmix64(splitmix64(master_seed) ^ index)``."""
    return splitmix64(splitmix64(int(master_seed) & MASK64) ^ (int(index) & MASK64))


# ---------------------------------------------------------------------------
# descriptions


def tempo_band(tempo_bpm: int) -> str:
    if tempo_bpm < 90:
        return "slow"
    if tempo_bpm <= 130:
        return "medium"
    return "fast"


def describe(spec: SongSpec, cfg: CorpusConfig = CorpusConfig()) -> tuple[str, str]:
    """(professional, amateur) descriptions from disjoint template vocabularies."""
    spec.validate(cfg)
    band, mode = tempo_band(spec.tempo_bpm), Mode(spec.mode)
    pro = ", ".join([PRO_TERMS["tempo"][band], PRO_TERMS["mode"][mode], PRO_TERMS["timbre"][spec.timbre_id]])
    am = ", ".join([AMATEUR_TERMS["tempo"][band], AMATEUR_TERMS["mode"][mode],
                    AMATEUR_TERMS["timbre"][spec.timbre_id]])
    return pro, am


def recover_attributes(description_am: str) -> tuple[str, Mode, int]:
    """Invert the amateur template map: (tempo band, mode, timbre_id)."""
    band = next(b for b, t in AMATEUR_TERMS["tempo"].items() if t in description_am)
    mode = next(m for m, t in AMATEUR_TERMS["mode"].items() if t in description_am)
    timbre = next(i for i, t in enumerate(AMATEUR_TERMS["timbre"]) if t in description_am)
    return band, mode, timbre


def description_vocabulary() -> list[str]:
    words = set()
    for table in (PRO_TERMS, AMATEUR_TERMS):
        for terms in table.values():
            vals = terms.values() if isinstance(terms, dict) else terms
            for phrase in vals:
                words.update(phrase.split())
    return sorted(words)


def theme_tokens(description: str) -> list[str]:
    return [w for w in description.replace(",", " ").replace(".", " ").split() if w]


# ---------------------------------------------------------------------------
# rendering

SCALES = {Mode.MAJOR: (0, 2, 4, 5, 7, 9, 11), Mode.MINOR: (0, 2, 3, 5, 7, 8, 10)}
PROGRESSIONS = {
    SectionTag.INTRO: (0,),
    SectionTag.VERSE: (0, 5, 3, 4),
    SectionTag.CHORUS: (3, 4, 0, 0),
    SectionTag.BRIDGE: (5, 3, 1, 4),
    SectionTag.OUTRO: (0,),
}
CHORD_TAIL = 0.4  # seconds
NOISE_BED = 3e-3  # std of the continuous shaker noise in the drums stem
REGISTER = {SectionTag.CHORUS: 12, SectionTag.BRIDGE: 5}
LOUDNESS = {SectionTag.INTRO: 0.5, SectionTag.VERSE: 0.8, SectionTag.CHORUS: 1.0,
            SectionTag.BRIDGE: 0.8, SectionTag.OUTRO: 0.6}
# per-beat (kick, hat) patterns, 4 beats per bar
DRUMS = {
    SectionTag.VERSE: ((1, 0), (0, 1), (1, 0), (0, 1)),
    SectionTag.CHORUS: ((1, 1), (1, 1), (1, 1), (1, 1)),
    SectionTag.BRIDGE: ((1, 1), (0, 1), (0, 1), (0, 1)),
}
FORMANTS = {"a": (800.0, 1200.0), "o": (500.0, 900.0), "e": (500.0, 1500.0),
            "i": (300.0, 2300.0), "u": (300.0, 800.0), "v": (300.0, 1900.0)}


def _degree_to_semitone(scale, degree: int) -> int:
    octave, idx = divmod(degree, len(scale))
    return 12 * octave + scale[idx]


def _triad(scale, degree: int) -> tuple[int, int, int]:
    return tuple(_degree_to_semitone(scale, degree + k) for k in (0, 2, 4))


def _harmonic_tone(freq: float, t: np.ndarray, amps: Sequence[float], rate: int, weights=None):
    out = np.zeros_like(t)
    for k, a in enumerate(amps, start=1):
        if a == 0.0 or k * freq >= rate / 2:
            continue
        g = a if weights is None else a * weights(k * freq)
        out += g * np.sin(2 * np.pi * k * freq * t)
    return out


def _envelope(n: int, rate: int, attack: float = 0.01, release: float = 0.05) -> np.ndarray:
    env = np.ones(n)
    a, r = min(n, max(1, int(attack * rate))), min(n, max(1, int(release * rate)))
    env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    env[n - r:] *= np.linspace(1.0, 0.0, r)
    return env


def _formant_weights(final: str):
    vowel = next((c for c in final if c in "aoeiuv"), "a")
    f1, f2 = FORMANTS[vowel]
    return lambda f: math.exp(-((f - f1) / 200.0) ** 2) + 0.7 * math.exp(-((f - f2) / 300.0) ** 2) + 0.05


def line_grid(spec: SongSpec) -> list[int]:
    """Lyric lines per section: one line per bar for sung sections, none otherwise."""
    return [b if SectionTag(t) in (SectionTag.VERSE, SectionTag.CHORUS, SectionTag.BRIDGE) else 0
            for t, b in spec.sections]


def render(spec: SongSpec, lyrics: StructuredLyrics, cfg: CorpusConfig, pt: PinyinTable,
           rng: np.random.Generator) -> dict[str, np.ndarray]:
    rate = cfg.rate
    n_total = int(round(spec.duration * rate))
    beat = 60.0 / spec.tempo_bpm
    scale = SCALES[Mode(spec.mode)]
    root = 196.0 * 2 ** (int(rng.integers(0, 7)) / 12.0)
    amps = TIMBRES[spec.timbre_id]
    stems = {name: np.zeros(n_total) for name in STEM_NAMES}

    bar_pos = 0
    for (tag, bars), sec in zip(spec.sections, lyrics.sections):
        tag = SectionTag(tag)
        prog = PROGRESSIONS[tag]
        loud = LOUDNESS[tag]
        syllables = [s for line in sec.lines for s in to_pinyin(line, pt)]
        for b in range(bars):
            bar_start = (bar_pos + b) * 4 * beat
            s0 = int(round(bar_start * rate))
            s1 = min(n_total, int(round((bar_start + 4 * beat) * rate)))
            t = np.arange(s1 - s0) / rate
            degree = prog[b % len(prog)]
            triad = _triad(scale, degree)
            fade = np.ones(s1 - s0)
            if tag is SectionTag.OUTRO:
                frac0 = b / bars
                fade = np.linspace(1.0 - frac0, 1.0 - (b + 1) / bars, s1 - s0) + 0.05
            # chords ring past the bar line so consecutive bars overlap
            s2 = min(n_total, s1 + int(CHORD_TAIL * rate))
            tc = np.arange(s2 - s0) / rate
            env = _envelope(s2 - s0, rate, attack=0.02, release=0.005)
            env[s1 - s0:] *= np.exp(-np.arange(s2 - s1) / (0.25 * CHORD_TAIL * rate))
            env[:s1 - s0] *= fade
            env[s1 - s0:] *= fade[-1]
            chord = sum(_harmonic_tone(root * 2 ** ((st + REGISTER.get(tag, 0)) / 12.0), tc, amps, rate)
                        for st in triad)
            stems["chords"][s0:s2] += 0.12 * loud * env * chord
            if tag is not SectionTag.INTRO:
                bass_f = root * 2 ** ((triad[0] - 12) / 12.0)
                pluck = np.exp(-t / (2 * beat))
                stems["bass"][s0:s1] += 0.3 * loud * pluck * fade * np.sin(2 * np.pi * bass_f * t)
            pattern = DRUMS.get(tag)
            for q in range(4):
                q0 = s0 + int(round(q * beat * rate))
                q1 = min(s1, q0 + int(0.12 * rate))
                if q1 <= q0:
                    continue
                tt = np.arange(q1 - q0) / rate
                if pattern and pattern[q][0]:
                    burst = lfilter([0.05], [1, -0.95], rng.standard_normal(q1 - q0))
                    stems["drums"][q0:q1] += 0.9 * loud * np.exp(-tt / 0.03) * burst
                if pattern and pattern[q][1]:
                    h0 = q0 + int(round(0.5 * beat * rate))
                    h1 = min(s1, h0 + int(0.04 * rate))
                    if h1 > h0:
                        noise = rng.standard_normal(h1 - h0)
                        hat = lfilter([1, -1], [1], noise) * 0.5
                        stems["drums"][h0:h1] += 0.15 * loud * np.exp(-np.arange(h1 - h0) / rate / 0.01) * hat
            for q in range(4):
                k = b * 4 + q
                if k >= len(syllables):
                    break
                ini, fin = syllables[k]
                q0 = s0 + int(round(q * beat * rate))
                q1 = min(s1, s0 + int(round((q + 1) * beat * rate)))
                tt = np.arange(q1 - q0) / rate
                tone = triad[zlib.crc32(f"{ini}{fin}".encode()) % 3] + 12
                f0 = root * 2 ** (tone / 12.0)
                voice = _harmonic_tone(f0, tt, [1.0 / k for k in range(1, 13)], rate, _formant_weights(fin))
                stems["vocal"][q0:q1] += 0.08 * loud * _envelope(q1 - q0, rate, 0.02, 0.08) * voice
        bar_pos += bars
    # low-level noise bed keeps every mel band above the log floor
    stems["drums"] += NOISE_BED * rng.standard_normal(n_total)
    return stems


def make_song(spec: SongSpec, cfg: CorpusConfig = CorpusConfig(), entry_id: str = "song",
              pt: PinyinTable | None = None, rt: RhymeClassTable | None = None) -> CorpusEntry:
    spec.validate(cfg)
    pt = pt or PinyinTable.default()
    rt = rt or RhymeClassTable.default()
    rng = np.random.default_rng(spec.seed)
    pro, am = describe(spec, cfg)
    rhyme_class = int(rt.classes[int(rng.integers(0, len(rt.classes)))])
    template = list(zip([SectionTag(t) for t, _ in spec.sections], line_grid(spec)))
    lyrics = generate_lyrics(theme_tokens(am), template, rhyme_class, spec.seed, pt, rt, cfg.line_length)
    stems = render(spec, lyrics, cfg, pt, rng)
    mix = sum(stems[name] for name in STEM_NAMES)
    peak = float(np.max(np.abs(mix)))
    if peak > 0.9:
        gain = 0.9 / peak
        stems = {k: v * gain for k, v in stems.items()}
        mix = sum(stems[name] for name in STEM_NAMES)
    return CorpusEntry(entry_id, mix, stems, lyrics, pro, am, spec, cfg.rate, rhyme_class)


def random_spec(index: int, seed: int, cfg: CorpusConfig = CorpusConfig()) -> SongSpec:
    """Spec for corpus entry ``index``; template, timbre and mode are stratified by index."""
    rng = np.random.default_rng(seed)
    template = TEMPLATES[index % len(TEMPLATES)]
    bars = sum(b for _, b in template)
    lo = max(60, math.ceil(bars * 240.0 / cfg.max_duration))
    tempo = int(rng.integers(lo, 181))
    mode = (Mode.MAJOR, Mode.MINOR)[(index // len(TIMBRES)) % 2]
    return SongSpec(tempo, mode, template, index % len(TIMBRES), seed)


def make_corpus(n: int, master_seed: int, cfg: CorpusConfig = CorpusConfig()) -> list[CorpusEntry]:
    if n < 1:
        raise SpecError("corpus size must be >= 1")
    entries = []
    for i in range(n):
        seed = derive_seed(master_seed, i)
        entries.append(make_song(random_spec(i, seed, cfg), cfg, f"song-{i:03d}"))
    return entries


def write_corpus(entries: Sequence[CorpusEntry], out_dir: str | Path) -> Path:
    """Write WAVs, stems, lyrics and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "stems").mkdir(exist_ok=True)
    (out / "lyrics").mkdir(exist_ok=True)
    rows = []
    for e in entries:
        audio_path = f"audio/{e.id}.wav"
        audio.write_wav(out / audio_path, e.waveform, e.rate)
        stem_paths = {}
        for name in STEM_NAMES:
            p = f"stems/{e.id}_{name}.wav"
            audio.write_wav(out / p, e.stems[name], e.rate)
            stem_paths[name] = p
        lyrics_path = f"lyrics/{e.id}.txt"
        (out / lyrics_path).write_text(serialize(e.lyrics) + "\n", encoding="utf-8")
        rows.append({
            "id": e.id,
            "audio_path": audio_path,
            "stem_paths": stem_paths,
            "lyrics_path": lyrics_path,
            "description_pro": e.description_pro,
            "description_am": e.description_am,
            "spec": e.spec.to_dict(),
        })
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows),
                        encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
