import csv
import itertools

import numpy as np
import pytest

from musit.lyrics import (DEFAULT_RULES, PAD_ID, LyricsError, LyricVocab, PinyinTable, RhymeClassTable, Section,
                          SectionTag, StructuredLyrics, detokenize, generate_lyrics, normalize_text,
                          parse_structured_lyrics, rhyme_scheme, serialize, to_pinyin, token_sequence, tokenize,
                          validate_structure)
from musit.lyrics import _data_path

PT = PinyinTable.default()
RT = RhymeClassTable.default()
CHARS = sorted(PT.entries)


def random_text(rng) -> str:
    """Random valid lyrics text with stray whitespace and blank lines."""
    out = []
    for _ in range(int(rng.integers(1, 6))):
        tag = list(SectionTag)[int(rng.integers(0, 5))]
        out.append(" " * int(rng.integers(0, 2)) + tag.token + " " * int(rng.integers(0, 3)))
        n = int(rng.integers(1 if tag.value in ("verse", "chorus", "bridge") else 0, 4))
        for _ in range(n):
            line = "".join(CHARS[int(rng.integers(0, len(CHARS)))] for _ in range(int(rng.integers(1, 7))))
            out.append("  " * int(rng.integers(0, 2)) + line + " " * int(rng.integers(0, 2)))
            if rng.random() < 0.2:
                out.append("")
    return "\n".join(out) + "\n" * int(rng.integers(0, 2))


# -- grammar ------------------------------------------------------------------

def test_parse_example():
    lyr = parse_structured_lyrics("<verse>\nline a\nline b\n<chorus>\nline c")
    assert lyr.tags == (SectionTag.VERSE, SectionTag.CHORUS)
    assert [len(s.lines) for s in lyr.sections] == [2, 1]


@pytest.mark.parametrize("text, line", [
    ("<verse>\n<chorus>\nx", 1),
    ("<verse>\nok\n<solo>\nx", 3),
    ("hello\n<verse>\nx", 1),
    ("", 1),
    ("   \n\n", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(LyricsError) as e:
        parse_structured_lyrics(text)
    assert e.value.line == line


def test_intro_outro_may_be_empty():
    lyr = parse_structured_lyrics("<intro>\n<verse>\nx\n<chorus>\ny\n<outro>")
    assert lyr.sections[0].lines == () and lyr.sections[-1].lines == ()


def test_round_trip_100_random_texts():
    rng = np.random.default_rng(11)
    for _ in range(100):
        text = random_text(rng)
        assert serialize(parse_structured_lyrics(text)) == normalize_text(text)


def test_structured_lyrics_invariants():
    with pytest.raises(LyricsError):
        StructuredLyrics(())
    with pytest.raises(LyricsError):
        StructuredLyrics((Section(SectionTag.VERSE, ()),))


# -- romanization and rhyme -----------------------------------------------------

def test_to_pinyin_with_given_table():
    table = PinyinTable({"妈": ("m", "a"), "花": ("h", "ua")})
    assert to_pinyin("妈", table) == [("m", "a")]
    assert to_pinyin("", table) == []
    with pytest.raises(LyricsError, match="position 1"):
        to_pinyin("妈x花", PinyinTable({"妈": ("m", "a")}, frozenset({"a"})))
    with pytest.raises(LyricsError, match="'猫' at position 2"):
        to_pinyin("妈花猫", table)


def test_romanized_syllables_accepted_verbatim():
    assert to_pinyin("zhuang ai", PT) == [("zh", "uang"), ("-", "ai")]
    with pytest.raises(LyricsError):
        to_pinyin("wei", PT)  # strict spelling is uei


def test_rhyme_scheme_given_tables():
    pt = PinyinTable({"妈": ("m", "a"), "花": ("h", "ua")})
    lyr = parse_structured_lyrics("<verse>\n妈\n花")
    assert rhyme_scheme(lyr, pt, RhymeClassTable({"a": 3, "ua": 3})) == [[3, 3]]
    assert rhyme_scheme(lyr, pt, RhymeClassTable({"a": 3, "ua": 5})) == [[3, 5]]


def _raw_tables():
    finals = {}
    with open(_data_path("pinyin.tsv"), encoding="utf-8") as fh:
        for ch, _ini, fin in csv.reader(fh, delimiter="\t"):
            finals[ch] = fin
    classes = {}
    with open(_data_path("rhyme.tsv"), encoding="utf-8") as fh:
        for fin, cid in csv.reader(fh, delimiter="\t"):
            classes[fin] = int(cid)
    return finals, classes


def test_rhyme_scheme_matches_brute_force_on_50_lyrics():
    finals, classes = _raw_tables()
    rng = np.random.default_rng(5)
    for _ in range(50):
        lyr = parse_structured_lyrics(random_text(rng))
        expected = []
        for sec in lyr.sections:
            row = []
            for line in sec.lines:
                last = [c for c in line if not c.isspace()][-1]
                row.append(classes[finals[last]])
            expected.append(row)
        assert rhyme_scheme(lyr, PT, RT) == expected


def test_rhyme_equivalence_is_a_partition():
    rng = np.random.default_rng(3)
    chars = [CHARS[i] for i in rng.integers(0, len(CHARS), 40)]
    rhymes = lambda a, b: RT[PT.entries[a][1]] == RT[PT.entries[b][1]]  # noqa: E731
    for a, b, c in itertools.product(chars[:12], repeat=3):
        assert rhymes(a, a)
        assert rhymes(a, b) == rhymes(b, a)
        if rhymes(a, b) and rhymes(b, c):
            assert rhymes(a, c)


def test_tables_cover_inventory():
    assert len(RT.classes) == 13
    assert all(fin in RT.entries for _, fin in PT.entries.values())
    assert 400 <= len(PT.entries) <= 600


def test_pinyin_table_agrees_with_pypinyin():
    pypinyin = pytest.importorskip("pypinyin")
    from pypinyin import Style, pinyin
    mismatches = 0
    for ch in CHARS[:200]:
        fin = pinyin(ch, style=Style.FINALS, strict=True)[0][0].replace("ü", "v")
        mismatches += fin != PT.entries[ch][1]
    assert mismatches == 0, f"{mismatches} table finals disagree with pypinyin {pypinyin.__version__}"


# -- generation -------------------------------------------------------------------

def test_generate_lyrics_template_and_rhyme():
    tmpl = [(SectionTag.VERSE, 2), (SectionTag.CHORUS, 2)]
    lyr = generate_lyrics(["sad", "rain"], tmpl, 3, seed=1)
    assert [(s.tag, len(s.lines)) for s in lyr.sections] == tmpl
    assert all(c == 3 for row in rhyme_scheme(lyr, PT, RT) for c in row)
    assert lyr == generate_lyrics(["sad", "rain"], tmpl, 3, seed=1)
    assert lyr != generate_lyrics(["sad", "rain"], tmpl, 3, seed=2)


def test_generate_lyrics_unsatisfiable_class_lists_available():
    pt = PinyinTable({"妈": ("m", "a")})
    with pytest.raises(LyricsError, match=r"available classes: \[0\]"):
        generate_lyrics(["x"], [(SectionTag.VERSE, 1)], 4, 0, pt, RT)


def test_generated_lyrics_validate_100_requests():
    rng = np.random.default_rng(9)
    valid_templates = [
        [(SectionTag.VERSE, 2), (SectionTag.CHORUS, 2)],
        [(SectionTag.INTRO, 0), (SectionTag.VERSE, 1), (SectionTag.CHORUS, 1), (SectionTag.BRIDGE, 1),
         (SectionTag.CHORUS, 1), (SectionTag.OUTRO, 0)],
        [(SectionTag.VERSE, 2), (SectionTag.CHORUS, 2), (SectionTag.VERSE, 2), (SectionTag.CHORUS, 2)],
    ]
    for k in range(100):
        tmpl = valid_templates[k % 3]
        cls = RT.classes[int(rng.integers(0, 13))]
        lyr = generate_lyrics(["w%d" % k], tmpl, cls, seed=k)
        assert validate_structure(lyr).passed


# -- tokens -------------------------------------------------------------------

def test_tag_tokens_are_single_ids():
    vocab = LyricVocab.from_table(PT)
    ids = [vocab.tag_id(t) for t in SectionTag]
    assert len(set(ids)) == 5 and PAD_ID not in ids
    assert all(vocab.token(vocab.tag_id(t)) == t.token for t in SectionTag)
    syl_ids = {vocab.syllable_id(s) for s in vocab.syllables}
    assert not syl_ids & set(ids)


def test_tokenize_ordering():
    vocab = LyricVocab.from_table(PT)
    a, b = CHARS[0], CHARS[1]
    lyr = parse_structured_lyrics(f"<intro>\n<verse>\n{a}{b}")
    s1 = "".join(x for x in PT.entries[a] if x != "-")
    s2 = "".join(x for x in PT.entries[b] if x != "-")
    assert tokenize(lyr, PT, vocab) == [vocab.tag_id(SectionTag.INTRO), vocab.tag_id(SectionTag.VERSE),
                                        vocab.syllable_id(s1), vocab.syllable_id(s2)]


def test_detokenize_round_trip_random():
    vocab = LyricVocab.from_table(PT)
    rng = np.random.default_rng(4)
    for _ in range(30):
        lyr = parse_structured_lyrics(random_text(rng))
        assert detokenize(tokenize(lyr, PT, vocab), vocab) == token_sequence(lyr, PT)


def test_out_of_dictionary_syllable():
    vocab = LyricVocab(("ma",))
    with pytest.raises(LyricsError):
        tokenize(parse_structured_lyrics("<verse>\nhua"), PT, vocab)


# -- structure ------------------------------------------------------------------

def test_validate_examples():
    assert validate_structure([SectionTag.VERSE, SectionTag.CHORUS]).passed
    rep = validate_structure([SectionTag.CHORUS])
    assert not rep.passed and rep.violations == ("verse before first chorus",)


def brute_force_violations(tags):
    out = []
    if not any(t == SectionTag.CHORUS for t in tags):
        out.append("at least one chorus")
    for k in range(len(tags) - 1):
        if tags[k] == SectionTag.BRIDGE and tags[k + 1] == SectionTag.BRIDGE:
            out.append("no consecutive bridge sections")
            break
    seen_verse = False
    ok = False
    for t in tags:
        if t == SectionTag.VERSE:
            seen_verse = True
        if t == SectionTag.CHORUS:
            ok = seen_verse
            break
    else:
        ok = seen_verse
    if not ok:
        out.append("verse before first chorus")
    return out


def test_rule_engine_matches_brute_force_200_lists():
    rng = np.random.default_rng(8)
    tags = list(SectionTag)
    for _ in range(200):
        seq = [tags[int(i)] for i in rng.integers(0, 5, int(rng.integers(1, 8)))]
        rep = validate_structure(seq)
        expected = brute_force_violations(seq)
        assert list(rep.violations) == expected
        assert rep.score == pytest.approx(1 - len(expected) / len(DEFAULT_RULES))
