"""Exact cosine retrieval over mixed-granularity chunk records."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyIndex, NotUnitNorm, ParseError
from .sentencizer import Sentence, count_tokens

UNIT_TOL = 1e-5


@dataclass
class ChunkRecord:
    doc_id: str
    indices: tuple[int, ...]
    embedding: np.ndarray
    ordinal: int = -1

    @property
    def granularity(self) -> int:
        return len(self.indices)

    @property
    def start(self) -> int:
        return self.indices[0]

    @property
    def key(self) -> tuple[str, tuple[int, ...]]:
        return self.doc_id, self.indices

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "indices": list(self.indices),
            "g": self.granularity,
            "s": self.start,
            "embedding": [float(x) for x in np.asarray(self.embedding, dtype=np.float32)],
        }


@dataclass
class RetrievalHit:
    record: ChunkRecord
    score: float
    rank: int


def exact_scores(matrix: np.ndarray, q) -> np.ndarray:
    """Cosine of each row of ``matrix`` (unit rows, float32 values) with ``q``.

    ``q`` is rounded to float32, so every elementwise product is exact in
    float64 and ``math.fsum`` makes each dot product correctly rounded. The
    scores therefore do not depend on BLAS or summation order.
    """
    q = np.asarray(q, dtype=np.float32).astype(np.float64)
    if q.ndim != 1 or (matrix.size and q.shape[0] != matrix.shape[1]):
        raise ValueError(f"query has shape {q.shape}, index rows have {matrix.shape[1:]}")
    qnorm = math.sqrt(math.fsum(q * q))
    if qnorm == 0 or not math.isfinite(qnorm):
        raise ValueError("query vector must be finite and non-zero")
    dots = np.array([math.fsum(row) for row in matrix * q])
    return np.clip(dots / qnorm, -1.0, 1.0)


class ChunkIndex:
    """Brute-force index. Readers may run concurrently; writers are serialized
    and swap in a fresh snapshot, so a query never sees a half-added record."""

    def __init__(self, records: Iterable[ChunkRecord] = ()):
        self._lock = threading.Lock()
        # (records, matrix) swapped as one object so readers never mix versions
        self._snapshot: tuple[list[ChunkRecord], np.ndarray] = ([], np.zeros((0, 0)))
        self._next_ordinal = 0
        self.add_chunks(records)

    def __len__(self) -> int:
        return len(self._snapshot[0])

    @property
    def records(self) -> list[ChunkRecord]:
        return list(self._snapshot[0])

    def add_chunks(self, records: Iterable[ChunkRecord]) -> int:
        """Append records; a record with an existing (doc_id, indices) key
        replaces the older one. Returns the number of records passed in."""
        incoming = []
        for r in records:
            emb = np.asarray(r.embedding, dtype=np.float32)
            norm = float(np.linalg.norm(emb.astype(np.float64)))
            if not np.all(np.isfinite(emb)) or abs(norm - 1.0) > UNIT_TOL:
                raise NotUnitNorm(f"record {r.doc_id}:{list(r.indices)} has norm {norm:.6f}")
            incoming.append((tuple(int(i) for i in r.indices), r.doc_id, emb))
        with self._lock:
            by_key = {rec.key: rec for rec in self._snapshot[0]}
            for indices, doc_id, emb in incoming:
                by_key[(doc_id, indices)] = ChunkRecord(doc_id, indices, emb, self._next_ordinal)
                self._next_ordinal += 1
            records = sorted(by_key.values(), key=lambda rec: rec.ordinal)
            matrix = (np.stack([rec.embedding for rec in records]).astype(np.float64)
                      if records else np.zeros((0, 0)))
            self._snapshot = (records, matrix)
        return len(incoming)

    def query_top_k(self, q, k: int) -> list[RetrievalHit]:
        """Top ``k`` by cosine; ties go to finer granularity, then earlier
        start, then earlier insertion."""
        if k < 1:
            raise ValueError("k must be >= 1")
        records, matrix = self._snapshot
        if not records:
            raise EmptyIndex("index is empty")
        scores = exact_scores(matrix, q)
        gran = np.array([r.granularity for r in records])
        start = np.array([r.start for r in records])
        ordinal = np.array([r.ordinal for r in records])
        order = np.lexsort((ordinal, start, gran, -scores))[:k]
        return [RetrievalHit(records[i], float(scores[i]), rank) for rank, i in enumerate(order, start=1)]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self._snapshot[0]:
                fh.write(json.dumps(rec.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ChunkIndex":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    records.append(ChunkRecord(str(obj["doc_id"]), tuple(obj["indices"]),
                                               np.asarray(obj["embedding"], dtype=np.float32)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(str(path), lineno, f"bad index record: {exc}") from exc
        return cls(records)


@dataclass
class Context:
    blocks: list[tuple[str, list[str]]] = field(default_factory=list)
    token_total: int = 0
    hits_used: int = 0
    warning: str | None = None

    def render(self) -> str:
        return "\n\n".join(" ".join(texts) for _, texts in self.blocks)


def assemble_context(hits: Sequence[RetrievalHit], sentences_by_doc: Mapping[str, Sequence[Sentence]],
                     token_budget: int) -> Context:
    """Union the hits' sentences in rank order until the next hit would blow the budget."""
    if token_budget < 1:
        raise ValueError("token_budget must be >= 1")
    chosen: dict[str, set[int]] = {}
    total = 0
    used = 0
    stopped = False
    for hit in hits:
        doc = hit.record.doc_id
        sents = sentences_by_doc[doc]
        seen = chosen.get(doc, set())
        new = [i for i in hit.record.indices if i not in seen]
        cost = sum(sents[i].token_count for i in new)
        if total + cost > token_budget:
            stopped = True
            break
        chosen.setdefault(doc, set()).update(new)
        total += cost
        used += 1
    ctx = Context(token_total=total, hits_used=used)
    for doc, idx in chosen.items():
        if idx:
            ctx.blocks.append((doc, [sentences_by_doc[doc][i].text for i in sorted(idx)]))
    if stopped and used == 0:
        ctx.warning = "token budget smaller than the top hit; context is empty"
    elif stopped:
        ctx.warning = f"token budget reached after {used} of {len(hits)} hits"
    return ctx


def context_tokens(ctx: Context) -> int:
    return sum(count_tokens(t) for _, texts in ctx.blocks for t in texts)
