"""Fixed-token and semantic-breakpoint chunkers used as comparison points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sentencizer import Document


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    first: int
    last: int
    text: str
    token_count: int

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(range(self.first, self.last + 1))

    @property
    def size(self) -> int:
        return self.last - self.first + 1


def _make_chunk(doc: Document, first: int, last: int) -> Chunk:
    tokens = sum(s.token_count for s in doc.sentences[first:last + 1])
    return Chunk(doc.id, first, last, doc.span_text(first, last), tokens)


def traditional_chunk(doc: Document, token_limit: int = 256) -> list[Chunk]:
    """Greedily pack consecutive sentences; a chunk is closed before the
    sentence that would take it over ``token_limit``. A sentence longer than
    the limit gets a chunk of its own."""
    if token_limit < 1:
        raise ValueError("token_limit must be >= 1")
    chunks = []
    first = 0
    total = 0
    for i, sent in enumerate(doc.sentences):
        if i > first and total + sent.token_count > token_limit:
            chunks.append(_make_chunk(doc, first, i - 1))
            first, total = i, 0
        total += sent.token_count
    if doc.sentences:
        chunks.append(_make_chunk(doc, first, len(doc.sentences) - 1))
    return chunks


def breakpoint_distances(E: np.ndarray) -> np.ndarray:
    """``1 - cos`` between each pair of adjacent rows."""
    E = np.asarray(E, dtype=np.float64)
    a, b = E[:-1], E[1:]
    cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return 1.0 - cos


def split_at_breakpoints(doc: Document, distances: np.ndarray, percentile: float = 50.0) -> list[Chunk]:
    n = len(doc.sentences)
    if n == 0:
        return []
    if n == 1:
        return [_make_chunk(doc, 0, 0)]
    threshold = float(np.percentile(distances, percentile))  # linear interpolation
    chunks = []
    first = 0
    for i, dist in enumerate(distances):
        if dist > threshold:
            chunks.append(_make_chunk(doc, first, i))
            first = i + 1
    chunks.append(_make_chunk(doc, first, n - 1))
    return chunks


def semantic_chunk(doc: Document, embedder, percentile: float = 50.0) -> list[Chunk]:
    """Split where the distance between neighbouring sentence embeddings is
    strictly above the given percentile of all such distances."""
    if len(doc.sentences) <= 1:
        return split_at_breakpoints(doc, np.zeros(0), percentile)
    E = embedder.embed(doc.sentence_texts())
    return split_at_breakpoints(doc, breakpoint_distances(E), percentile)
