"""Rule-based sentence segmentation and a simple deterministic tokenizer.

Sentences are the atomic units everything downstream indexes, so the
splitter is deliberately boring: it splits after ``.``, ``!`` or ``?`` (plus
any closing quotes/brackets) when followed by whitespace or end of text,
unless the word carrying the period is a known abbreviation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

DEFAULT_ABBREVIATIONS: frozenset[str] = frozenset(
    {
        "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "mt.",
        "rev.", "gen.", "gov.", "capt.", "col.", "lt.", "sgt.", "hon.",
        "e.g.", "i.e.", "etc.", "vs.", "cf.", "al.", "approx.", "fig.",
        "figs.", "eq.", "vol.", "pp.", "ed.", "eds.", "dept.", "est.",
        "inc.", "ltd.", "co.", "corp.", "a.m.", "p.m.", "u.s.", "u.k.",
        "jan.", "feb.", "mar.", "apr.", "jun.", "jul.", "aug.", "sep.",
        "sept.", "oct.", "nov.", "dec.",
    }
)

_CLOSERS = "\"'”’)]}»"
_OPENERS = "\"'“‘([{«"
_BOUNDARY = re.compile(r"[.!?]+[" + re.escape(_CLOSERS) + r"]*(?=\s|$)")
_TOKEN = re.compile(r"[^\W_]+|[^\w\s]|_")


@dataclass(frozen=True)
class Sentence:
    index: int
    text: str
    byte_span: tuple[int, int]
    token_count: int
    char_span: tuple[int, int] = field(compare=False)


@dataclass
class Document:
    id: str
    text: str
    sentences: list[Sentence]

    @property
    def n(self) -> int:
        return len(self.sentences)

    def sentence_texts(self) -> list[str]:
        return [s.text for s in self.sentences]

    def span_text(self, first: int, last: int) -> str:
        """Source text from sentence ``first`` through ``last`` inclusive."""
        start = self.sentences[first].char_span[0]
        end = self.sentences[last].char_span[1]
        return self.text[start:end]


def count_tokens(text: str) -> int:
    """Alphanumeric runs count as one token each; every other
    non-whitespace character is a token on its own."""
    return len(_TOKEN.findall(text))


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text)


def load_abbreviations(path: str | Path) -> frozenset[str]:
    """One abbreviation per line, blank lines and ``#`` comments ignored."""
    entries = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            entries.add(line.lower())
    return frozenset(entries)


def _is_abbreviation(text: str, sent_start: int, period_pos: int, abbrevs) -> bool:
    word_start = period_pos
    while word_start > sent_start and not text[word_start - 1].isspace():
        word_start -= 1
    word = text[word_start : period_pos + 1].lstrip(_OPENERS)
    return word.lower() in abbrevs


def _char_spans(text: str, abbrevs) -> list[tuple[int, int]]:
    spans = []
    length = len(text)

    def skip_ws(i: int) -> int:
        while i < length and text[i].isspace():
            i += 1
        return i

    start = skip_ws(0)
    for m in _BOUNDARY.finditer(text):
        if m.start() < start:
            continue
        run = m.group(0).rstrip(_CLOSERS)
        if run == "." and _is_abbreviation(text, start, m.start(), abbrevs):
            continue
        spans.append((start, m.end()))
        start = skip_ws(m.end())
    if start < length:
        end = length
        while end > start and text[end - 1].isspace():
            end -= 1
        if end > start:
            spans.append((start, end))
    return spans


def _byte_offsets(text: str, positions: Iterable[int]) -> list[int]:
    # positions must be non-decreasing
    out = []
    prev_char = 0
    prev_byte = 0
    for p in positions:
        prev_byte += len(text[prev_char:p].encode("utf-8"))
        prev_char = p
        out.append(prev_byte)
    return out


def split_sentences(text: str, abbreviations: frozenset[str] | None = None) -> list[Sentence]:
    """Split ``text`` into sentences.

    Decimal numbers such as ``3.14`` never split because a boundary requires
    whitespace (or end of text) after the punctuation run.
    """
    abbrevs = DEFAULT_ABBREVIATIONS if abbreviations is None else abbreviations
    spans = _char_spans(text, abbrevs)
    flat = [p for span in spans for p in span]
    offsets = _byte_offsets(text, flat)
    sentences = []
    for i, (a, b) in enumerate(spans):
        piece = text[a:b]
        sentences.append(
            Sentence(
                index=i,
                text=piece,
                byte_span=(offsets[2 * i], offsets[2 * i + 1]),
                token_count=count_tokens(piece),
                char_span=(a, b),
            )
        )
    return sentences


def sentencize(doc_id: str, text: str, abbreviations: frozenset[str] | None = None) -> Document:
    return Document(id=doc_id, text=text, sentences=split_sentences(text, abbreviations))


def reconstruct(text: str, sentences: list[Sentence]) -> str:
    """Rebuild ``text`` from sentence texts plus the whitespace gaps between them."""
    parts = []
    prev = 0
    for s in sentences:
        a, b = s.char_span
        parts.append(text[prev:a])
        parts.append(s.text)
        prev = b
    parts.append(text[prev:])
    return "".join(parts)
