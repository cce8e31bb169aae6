"""Structured lyrics: section-tag grammar, pinyin romanization, rhyme classes,
template lyric generation, tokenization and structure validation.

Lyrics text format::

    <verse>
    line one
    line two
    <chorus>
    line three

A tag line opens a section; every following non-blank line belongs to it.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class LyricsError(ValueError):
    """Raised for malformed lyrics, unmapped characters and bad requests."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SectionTag(str, enum.Enum):
    INTRO = "intro"
    VERSE = "verse"
    CHORUS = "chorus"
    BRIDGE = "bridge"
    OUTRO = "outro"

    @property
    def token(self) -> str:
        return f"<{self.value}>"

    @classmethod
    def from_token(cls, text: str) -> "SectionTag":
        text = text.strip()
        if not (text.startswith("<") and text.endswith(">")):
            raise ValueError(f"not a section tag: {text!r}")
        return cls(text[1:-1])


# sections that carry sung lines and must not be empty
LYRIC_SECTIONS = frozenset({SectionTag.VERSE, SectionTag.CHORUS, SectionTag.BRIDGE})


@dataclass(frozen=True)
class Section:
    tag: SectionTag
    lines: tuple[str, ...] = ()


@dataclass(frozen=True)
class StructuredLyrics:
    sections: tuple[Section, ...]

    def __post_init__(self):
        if not self.sections:
            raise LyricsError("lyrics need at least one section")
        for i, sec in enumerate(self.sections):
            if sec.tag in LYRIC_SECTIONS and not any(l.strip() for l in sec.lines):
                raise LyricsError(f"section {i} ({sec.tag.token}) has no lyric lines")

    @property
    def tags(self) -> tuple[SectionTag, ...]:
        return tuple(s.tag for s in self.sections)

    @property
    def lines(self) -> list[str]:
        return [l for s in self.sections for l in s.lines]


# ---------------------------------------------------------------------------
# grammar


def parse_structured_lyrics(text: str) -> StructuredLyrics:
    if not text.strip():
        raise LyricsError("empty lyrics text", line=1)
    sections: list[tuple[SectionTag, list[str], int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("<") and line.endswith(">"):
            try:
                tag = SectionTag.from_token(line)
            except ValueError:
                raise LyricsError(f"unknown section tag {line}", line=lineno) from None
            sections.append((tag, [], lineno))
            continue
        if not sections:
            raise LyricsError("lyric line before any section tag", line=lineno)
        sections[-1][1].append(line)
    for tag, lines, lineno in sections:
        if tag in LYRIC_SECTIONS and not lines:
            raise LyricsError(f"empty {tag.token} section", line=lineno)
    return StructuredLyrics(tuple(Section(tag, tuple(lines)) for tag, lines, _ in sections))


def serialize(lyrics: StructuredLyrics) -> str:
    out = []
    for sec in lyrics.sections:
        out.append(sec.tag.token)
        out.extend(sec.lines)
    return "\n".join(out)


def normalize_text(text: str) -> str:
    """Canonical form of a valid lyrics text: trimmed lines, blank lines dropped."""
    return "\n".join(l.strip() for l in text.splitlines() if l.strip())


# ---------------------------------------------------------------------------
# romanization tables

INITIALS = (
    "zh", "ch", "sh", "b", "p", "m", "f", "d", "t", "n", "l",
    "g", "k", "h", "j", "q", "x", "r", "z", "c", "s",
)
NO_INITIAL = "-"


def _data_path(name: str) -> Path:
    return Path(str(resources.files("musit") / "data" / name))


@dataclass(frozen=True)
class RhymeClassTable:
    entries: Mapping[str, int]

    @classmethod
    def from_tsv(cls, path: str | Path) -> "RhymeClassTable":
        entries = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                final, cid = line.split("\t")
                if final in entries:
                    raise LyricsError(f"final {final!r} listed twice in rhyme table")
                entries[final] = int(cid)
        return cls(entries)

    @classmethod
    def default(cls) -> "RhymeClassTable":
        return _default_rhymes()

    @property
    def finals(self) -> frozenset[str]:
        return frozenset(self.entries)

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.entries.values()))

    def __getitem__(self, final: str) -> int:
        return self.entries[final]


@dataclass(frozen=True)
class PinyinTable:
    entries: Mapping[str, tuple[str, str]]
    finals: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.finals:
            bad = sorted({f for _, f in self.entries.values()} - self.finals)
            if bad:
                raise LyricsError(f"finals outside the inventory: {bad}")

    @classmethod
    def from_tsv(cls, path: str | Path, finals: Iterable[str] = ()) -> "PinyinTable":
        entries = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                ch, ini, fin = line.split("\t")
                entries[ch] = (ini, fin)
        return cls(entries, frozenset(finals))

    @classmethod
    def default(cls) -> "PinyinTable":
        return _default_pinyin()

    def syllables(self) -> list[str]:
        return sorted({syllable_text(i, f) for i, f in self.entries.values()})


_CACHE: dict[str, object] = {}


def _default_rhymes() -> RhymeClassTable:
    if "rhymes" not in _CACHE:
        _CACHE["rhymes"] = RhymeClassTable.from_tsv(_data_path("rhyme.tsv"))
    return _CACHE["rhymes"]


def _default_pinyin() -> PinyinTable:
    if "pinyin" not in _CACHE:
        _CACHE["pinyin"] = PinyinTable.from_tsv(
            _data_path("pinyin.tsv"), _default_rhymes().finals
        )
    return _CACHE["pinyin"]


def syllable_text(initial: str, final: str) -> str:
    return final if initial == NO_INITIAL else initial + final


def split_romanized(word: str, finals: frozenset[str]) -> tuple[str, str] | None:
    """Split a strict-spelling syllable like ``zhuang`` into (initial, final)."""
    for ini in INITIALS:
        if word.startswith(ini) and word[len(ini):] in finals:
            return ini, word[len(ini):]
    if word in finals:
        return NO_INITIAL, word
    return None


def to_pinyin(line: str, table: PinyinTable) -> list[tuple[str, str]]:
    """One (initial, final) pair per character, in order.

    ASCII words are accepted verbatim when they spell a syllable of the final
    inventory (strict spelling: ``uei`` not ``wei``). Whitespace is skipped.
    """
    finals = table.finals or frozenset(f for _, f in table.entries.values())
    out = []
    i = 0
    while i < len(line):
        ch = line[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isascii() and ch.isalpha():
            j = i
            while j < len(line) and line[j].isascii() and line[j].isalpha():
                j += 1
            parts = split_romanized(line[i:j].lower(), finals)
            if parts is None:
                raise LyricsError(f"invalid romanized syllable {line[i:j]!r} at position {i}")
            out.append(parts)
            i = j
            continue
        if ch not in table.entries:
            raise LyricsError(f"unmapped character {ch!r} at position {i}")
        out.append(tuple(table.entries[ch]))
        i += 1
    return out


def rhyme_scheme(
    lyrics: StructuredLyrics, pt: PinyinTable, rt: RhymeClassTable
) -> list[list[int]]:
    """Rhyme class of every line's last syllable, grouped by section."""
    scheme = []
    for sec in lyrics.sections:
        classes = []
        for line in sec.lines:
            syl = to_pinyin(line, pt)
            if not syl:
                raise LyricsError(f"line {line!r} has no syllables")
            classes.append(rt[syl[-1][1]])
        scheme.append(classes)
    return scheme


# ---------------------------------------------------------------------------
# template lyric generator (deterministic stand-in for a lyric LLM)


def _stream_seed(seed: int, theme_tokens: Sequence[str]) -> int:
    h = hashlib.sha256(str(int(seed)).encode())
    for tok in theme_tokens:
        h.update(b"\x00" + tok.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def generate_lyrics(
    theme_tokens: Sequence[str],
    template: Sequence[tuple[SectionTag, int]],
    rhyme_class: int,
    seed: int,
    pt: PinyinTable | None = None,
    rt: RhymeClassTable | None = None,
    line_length: int = 4,
) -> StructuredLyrics:
    """Fill a section template with lines whose last syllable is in ``rhyme_class``.

    Theme tokens pick a small motif set of characters that opens every line;
    repeated choruses reuse the first chorus verbatim.
    """
    pt = pt or PinyinTable.default()
    rt = rt or RhymeClassTable.default()
    if not template:
        raise LyricsError("empty section template")
    bank = sorted(pt.entries)
    rhyming = [c for c in bank if rt.entries.get(pt.entries[c][1]) == rhyme_class]
    if not rhyming:
        available = sorted({rt.entries[f] for _, f in pt.entries.values() if f in rt.entries})
        raise LyricsError(
            f"no word of rhyme class {rhyme_class} in the word bank; available classes: {available}"
        )
    rng = np.random.default_rng(_stream_seed(seed, theme_tokens))
    motif = [bank[int.from_bytes(hashlib.sha256(t.encode()).digest()[:4], "little") % len(bank)]
             for t in theme_tokens] or [bank[0]]

    def make_line(k: int) -> str:
        chars = [motif[k % len(motif)]]
        chars += [bank[j] for j in rng.integers(0, len(bank), size=max(line_length - 2, 0))]
        chars.append(rhyming[int(rng.integers(0, len(rhyming)))])
        return "".join(chars[-line_length:]) if line_length >= 1 else ""

    chorus: tuple[str, ...] | None = None
    sections = []
    for tag, n_lines in template:
        tag = SectionTag(tag)
        if n_lines < 0:
            raise LyricsError(f"negative line count for {tag.token}")
        if tag is SectionTag.CHORUS and chorus is not None and len(chorus) == n_lines:
            lines = chorus
        else:
            lines = tuple(make_line(k) for k in range(n_lines))
            if tag is SectionTag.CHORUS and chorus is None:
                chorus = lines
        sections.append(Section(tag, lines))
    return StructuredLyrics(tuple(sections))


# ---------------------------------------------------------------------------
# tokenization

PAD_ID = 0


@dataclass(frozen=True)
class LyricVocab:
    """Single dictionary: padding at 0, one id per section tag, then syllables."""

    syllables: tuple[str, ...]

    @classmethod
    def from_table(cls, pt: PinyinTable | None = None) -> "LyricVocab":
        return cls(tuple((pt or PinyinTable.default()).syllables()))

    @property
    def tags(self) -> tuple[SectionTag, ...]:
        return tuple(SectionTag)

    def __len__(self) -> int:
        return 1 + len(SectionTag) + len(self.syllables)

    def tag_id(self, tag: SectionTag) -> int:
        return 1 + list(SectionTag).index(SectionTag(tag))

    def syllable_id(self, syllable: str) -> int:
        idx = self._index.get(syllable)
        if idx is None:
            raise LyricsError(f"syllable {syllable!r} not in the lyric dictionary")
        return idx

    @property
    def _index(self) -> dict[str, int]:
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            base = 1 + len(SectionTag)
            cached = {s: base + i for i, s in enumerate(self.syllables)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def token(self, idx: int) -> str:
        if idx == PAD_ID:
            return "<pad>"
        if 1 <= idx <= len(SectionTag):
            return list(SectionTag)[idx - 1].token
        return self.syllables[idx - 1 - len(SectionTag)]


def tokenize(
    lyrics: StructuredLyrics, pt: PinyinTable | None = None, vocab: LyricVocab | None = None
) -> list[int]:
    pt = pt or PinyinTable.default()
    vocab = vocab or LyricVocab.from_table(pt)
    ids = []
    for sec in lyrics.sections:
        ids.append(vocab.tag_id(sec.tag))
        for line in sec.lines:
            ids.extend(vocab.syllable_id(syllable_text(i, f)) for i, f in to_pinyin(line, pt))
    return ids


def detokenize(ids: Sequence[int], vocab: LyricVocab) -> list[str]:
    return [vocab.token(i) for i in ids if i != PAD_ID]


def token_sequence(lyrics: StructuredLyrics, pt: PinyinTable | None = None) -> list[str]:
    """Tag/syllable strings in emission order (what ``detokenize`` should return)."""
    pt = pt or PinyinTable.default()
    out = []
    for sec in lyrics.sections:
        out.append(sec.tag.token)
        for line in sec.lines:
            out.extend(syllable_text(i, f) for i, f in to_pinyin(line, pt))
    return out


# ---------------------------------------------------------------------------
# structure rules


Rule = tuple[str, Callable[[Sequence[SectionTag]], bool]]


def _has_chorus(tags):
    return SectionTag.CHORUS in tags


def _no_adjacent_bridges(tags):
    return not any(a is SectionTag.BRIDGE and b is SectionTag.BRIDGE for a, b in zip(tags, tags[1:]))


def _verse_before_chorus(tags):
    first = tags.index(SectionTag.CHORUS) if SectionTag.CHORUS in tags else len(tags)
    return SectionTag.VERSE in tags[:first]


DEFAULT_RULES: tuple[Rule, ...] = (
    ("at least one chorus", _has_chorus),
    ("no consecutive bridge sections", _no_adjacent_bridges),
    ("verse before first chorus", _verse_before_chorus),
)


@dataclass(frozen=True)
class StructureReport:
    passed: bool
    violations: tuple[str, ...]
    n_rules: int

    @property
    def score(self) -> float:
        if self.n_rules == 0:
            return 1.0
        return min(1.0, max(0.0, 1.0 - len(self.violations) / self.n_rules))

    def to_dict(self) -> dict:
        return {"pass": self.passed, "violations": list(self.violations), "score": self.score}


def validate_structure(
    lyrics: StructuredLyrics | Sequence[SectionTag], rules: Sequence[Rule] = DEFAULT_RULES
) -> StructureReport:
    tags = lyrics.tags if isinstance(lyrics, StructuredLyrics) else tuple(SectionTag(t) for t in lyrics)
    violations = tuple(name for name, ok in rules if not ok(tags))
    return StructureReport(not violations, violations, len(rules))
