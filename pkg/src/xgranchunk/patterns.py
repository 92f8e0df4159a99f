"""Chunk patterns and the additive attention mask built from them.

A pattern is a set of sentence indices. A pattern set stacks ``m`` patterns
over an ``n``-sentence document; its mask is an ``m x n`` matrix holding 0
where sentence ``j`` belongs to pattern ``i`` and a large negative sentinel
everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptyDocument, EmptyPattern, IndexOutOfRange, NoGranularities

# Finite stand-in for -inf: a fully masked row stays detectable instead of
# turning into NaN inside the softmax.
MASK_VALUE = -1e9

DEFAULT_GRANULARITIES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class ChunkPattern:
    sentence_indices: tuple[int, ...]

    def __post_init__(self):
        idx = self.sentence_indices
        if not idx:
            raise EmptyPattern("chunk pattern must contain at least one sentence")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing: {idx}")
        if idx[0] < 0:
            raise ValueError(f"negative sentence index: {idx[0]}")

    @classmethod
    def from_indices(cls, indices: Iterable[int]) -> "ChunkPattern":
        return cls(tuple(sorted(set(int(i) for i in indices))))

    @classmethod
    def span(cls, start: int, stop: int) -> "ChunkPattern":
        return cls(tuple(range(start, stop)))

    @property
    def granularity(self) -> int:
        return len(self.sentence_indices)

    @property
    def start(self) -> int:
        return self.sentence_indices[0]

    @property
    def contiguous(self) -> bool:
        idx = self.sentence_indices
        return idx[-1] - idx[0] + 1 == len(idx)


@dataclass(frozen=True)
class PatternSet:
    n: int
    patterns: tuple[ChunkPattern, ...]

    def __post_init__(self):
        for pos, p in enumerate(self.patterns):
            if p.sentence_indices[-1] >= self.n:
                raise IndexOutOfRange(pos, p.sentence_indices[-1], self.n)

    @property
    def m(self) -> int:
        return len(self.patterns)

    def __len__(self) -> int:
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def __getitem__(self, i: int) -> ChunkPattern:
        return self.patterns[i]

    def index_sets(self) -> list[tuple[int, ...]]:
        return [p.sentence_indices for p in self.patterns]


def _stride_for(g: int, stride) -> int:
    if stride is None:
        return g
    if isinstance(stride, Mapping):
        return int(stride.get(g, g))
    return int(stride)


def build_sliding_patterns(
    n: int,
    granularities: Iterable[int] = DEFAULT_GRANULARITIES,
    stride: int | Mapping[int, int] | None = None,
) -> PatternSet:
    """Contiguous windows for every granularity, finest first.

    ``stride`` defaults to the window size (no overlap); pass an int to use
    one stride for every granularity or a ``{g: stride}`` mapping. Trailing
    windows are truncated at ``n`` rather than dropped, and an index set
    already emitted is not emitted again.
    """
    if n < 1:
        raise EmptyDocument("cannot build patterns for a document with no sentences")
    gs = sorted(set(int(g) for g in granularities))
    if not gs:
        raise NoGranularities("at least one granularity is required")
    if gs[0] < 1:
        raise ValueError(f"granularities must be positive, got {gs[0]}")

    seen = set()
    patterns = []
    for g in gs:
        step = _stride_for(g, stride)
        if step < 1:
            raise ValueError(f"stride for granularity {g} must be positive")
        for s in range(0, n, step):
            p = ChunkPattern.span(s, min(s + g, n))
            if p.sentence_indices not in seen:
                seen.add(p.sentence_indices)
                patterns.append(p)
    return PatternSet(n=n, patterns=tuple(patterns))


def build_explicit_patterns(n: int, index_sets: Iterable[Iterable[int]]) -> PatternSet:
    """Arbitrary (possibly non-contiguous) sentence sets, order preserved."""
    patterns = []
    for pos, indices in enumerate(index_sets):
        idx = sorted(set(int(i) for i in indices))
        if not idx:
            raise EmptyPattern(f"pattern {pos} is empty")
        for i in idx:
            if i < 0 or i >= n:
                raise IndexOutOfRange(pos, i, n)
        patterns.append(ChunkPattern(tuple(idx)))
    return PatternSet(n=n, patterns=tuple(patterns))


def pattern_to_mask(ps: PatternSet, dtype=np.float32) -> np.ndarray:
    mask = np.full((ps.m, ps.n), MASK_VALUE, dtype=dtype)
    for i, p in enumerate(ps.patterns):
        mask[i, list(p.sentence_indices)] = 0
    return mask


def mask_to_patterns(mask: np.ndarray) -> PatternSet:
    """Inverse of :func:`pattern_to_mask`."""
    mask = np.asarray(mask)
    sets = [tuple(int(j) for j in np.flatnonzero(row == 0)) for row in mask]
    return build_explicit_patterns(mask.shape[1], sets)


def parse_pattern_spec(spec: str) -> tuple[list[int], int | None]:
    """Parse the CLI form ``"g1,g2,...[:stride]"``."""
    body, _, stride_part = spec.partition(":")
    try:
        gs = [int(tok) for tok in body.split(",") if tok.strip()]
        stride = int(stride_part) if stride_part.strip() else None
    except ValueError as exc:
        raise ValueError(f"bad pattern spec {spec!r}: expected 'g1,g2,...[:stride]'") from exc
    if not gs:
        raise NoGranularities(f"pattern spec {spec!r} lists no granularities")
    return gs, stride
