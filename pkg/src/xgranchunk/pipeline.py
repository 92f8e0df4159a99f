"""End-to-end indexing, the synthetic needle benchmark, and corpus I/O."""

from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import baselines
from .config import Config
from .embedders import CountingEmbedder, RemoteEmbedder, RemoteEmbedderConfig, ToyEmbedder, prune_dimensions
from .encoder import EncoderWeights, RunTrace, forward
from .errors import ChunkerError, DataError, ParseError
from .patterns import build_sliding_patterns, pattern_to_mask
from .retrieval import ChunkIndex, ChunkRecord
from .sentencizer import DEFAULT_ABBREVIATIONS, Document, load_abbreviations, sentencize
from .training import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

METHODS = ("traditional", "semantic", "freechunk")


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    text: str


def load_corpus(path: str | Path) -> list[CorpusRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise ParseError(str(path), lineno, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), (str, int)) \
                    or not isinstance(obj.get("text"), str):
                raise ParseError(str(path), lineno, 'expected {"id": ..., "text": "..."}')
            doc_id = str(obj["id"])
            if doc_id in seen:
                raise ParseError(str(path), lineno, f"duplicate document id {doc_id!r}")
            if not obj["text"].strip():
                raise ParseError(str(path), lineno, f"document {doc_id!r} has empty text")
            seen.add(doc_id)
            records.append(CorpusRecord(doc_id, obj["text"]))
    return records


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def build_embedder(cfg: Config):
    if cfg.embedder == "toy":
        return ToyEmbedder(d=cfg.d, seed=cfg.seed)
    return RemoteEmbedder(RemoteEmbedderConfig(
        base_url=cfg.base_url, model=cfg.model, api_key_env=cfg.api_key_env,
        batch_size=cfg.batch_size, timeout=cfg.timeout, retries=cfg.retries,
        max_concurrency=cfg.max_concurrency,
    ))


def abbreviations_for(cfg: Config) -> frozenset[str]:
    return load_abbreviations(cfg.abbreviations) if cfg.abbreviations else DEFAULT_ABBREVIATIONS


class StageTimer:
    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0


@dataclass
class PipelineResult:
    method: str
    index: ChunkIndex
    documents: list[Document]
    timings: dict[str, float]
    total_seconds: float
    trace: RunTrace

    @property
    def chunk_seconds(self) -> float:
        return self.timings.get("sentencize", 0.0) + self.timings.get("chunk", 0.0)

    @property
    def encode_seconds(self) -> float:
        return self.timings.get("embed", 0.0) + self.timings.get("encode", 0.0)


def _freechunk_records(doc: Document, embedder: CountingEmbedder, weights: EncoderWeights,
                       cfg: Config, timer: StageTimer) -> list[ChunkRecord]:
    with timer.stage("chunk"):
        ps = build_sliding_patterns(doc.n, cfg.granularities, cfg.stride)
        mask = pattern_to_mask(ps)
    with timer.stage("embed"):
        E = embedder.embed(doc.sentence_texts())
        if E.shape[1] > weights.d:
            E = prune_dimensions(E, weights.d)
    with timer.stage("encode"):
        out = forward(weights, E, mask, pattern_set=ps, trace=embedder.trace)
    return [ChunkRecord(doc.id, p.sentence_indices, row) for p, row in zip(ps.patterns, out.matrix)]


def _baseline_records(doc: Document, method: str, embedder: CountingEmbedder, cfg: Config,
                      timer: StageTimer) -> list[ChunkRecord]:
    with timer.stage("chunk"):
        if method == "traditional":
            chunks = baselines.traditional_chunk(doc, cfg.token_limit)
        else:
            chunks = baselines.semantic_chunk(doc, embedder, cfg.percentile)
    with timer.stage("embed"):
        vecs = embedder.embed([c.text for c in chunks], sentence_counts=[c.size for c in chunks])
    return [ChunkRecord(doc.id, c.indices, v) for c, v in zip(chunks, vecs)]


def run_pipeline(corpus: Sequence[CorpusRecord], method: str, cfg: Config, *, embedder=None,
                 weights: EncoderWeights | None = None, index_path: str | Path | None = None) -> PipelineResult:
    """sentencize -> chunk/patterns -> embed -> (encoder forward) -> index."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "freechunk" and weights is None:
        raise ValueError("freechunk indexing needs encoder weights")
    trace = RunTrace()
    counting = CountingEmbedder(embedder if embedder is not None else build_embedder(cfg), trace)
    abbrevs = abbreviations_for(cfg)
    timer = StageTimer()
    t0 = time.perf_counter()
    documents = []
    records: list[ChunkRecord] = []
    for rec in corpus:
        try:
            with timer.stage("sentencize"):
                doc = sentencize(rec.id, rec.text, abbrevs)
            if doc.n == 0:
                log.warning("document %s has no sentences; skipped", rec.id)
                continue
            documents.append(doc)
            if method == "freechunk":
                records.extend(_freechunk_records(doc, counting, weights, cfg, timer))
            else:
                records.extend(_baseline_records(doc, method, counting, cfg, timer))
        except DataError as exc:
            raise DataError(f"document {rec.id}: {exc}") from exc
    with timer.stage("index"):
        index = ChunkIndex(records)
        if index_path is not None:
            index.save(index_path)
    total = time.perf_counter() - t0
    return PipelineResult(method, index, documents, timer.seconds, total, trace)


# -- synthetic needle benchmark -----------------------------------------

_SYLLABLES = ["ka", "lo", "mi", "ren", "tu", "sa", "vor", "ne", "li", "dap", "qui", "ber",
              "hon", "ze", "mar", "pol", "fi", "gut", "wen", "ost"]


def _vocabulary(rng: np.random.Generator, size: int = 400) -> list[str]:
    banned = {a.rstrip(".") for a in DEFAULT_ABBREVIATIONS}
    words: set[str] = set()
    while len(words) < size:
        w = "".join(rng.choice(_SYLLABLES, size=rng.integers(2, 4)))
        if w not in banned:
            words.add(w)
    return sorted(words)


def make_synthetic_corpus(num_docs: int, sentences_per_doc: int, seed: int = 0,
                          prefix: str = "doc") -> list[CorpusRecord]:
    """Documents of pseudo-random word sentences, each ending in a period."""
    rng = np.random.default_rng(seed)
    vocab = _vocabulary(rng)
    corpus = []
    for i in range(num_docs):
        sents = []
        for _ in range(sentences_per_doc):
            words = list(rng.choice(vocab, size=rng.integers(6, 19)))
            words[0] = words[0].capitalize()
            sents.append(" ".join(words) + ".")
        corpus.append(CorpusRecord(f"{prefix}{i:04d}", " ".join(sents)))
    return corpus


@dataclass
class NeedleQuery:
    doc_id: str
    span: tuple[int, int]  # inclusive sentence range
    vector: np.ndarray


def make_needle_queries(documents: Sequence[Document], embedder, num_queries: int,
                        granularity: int, seed: int = 0) -> list[NeedleQuery]:
    """Each query is the teacher (mean-pooled) embedding of a random span of
    ``granularity`` consecutive sentences."""
    rng = np.random.default_rng(seed + 7919)
    eligible = [d for d in documents if d.n >= granularity]
    if num_queries and not eligible:
        raise DataError(f"no document has {granularity} sentences")
    queries = []
    for _ in range(num_queries):
        doc = eligible[rng.integers(len(eligible))]
        first = int(rng.integers(0, doc.n - granularity + 1))
        E = np.asarray(embedder.embed(doc.sentence_texts()[first:first + granularity]), dtype=np.float64)
        mean = E.mean(axis=0)
        queries.append(NeedleQuery(doc.id, (first, first + granularity - 1), (mean / np.linalg.norm(mean)).astype(np.float32)))
    return queries


@dataclass
class EvalReport:
    method: str
    queries: int
    hit_at: dict[int, float]
    mrr: float
    chunk_seconds: float
    encode_seconds: float
    sentence_encodings: int
    chunk_count: int
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"method": self.method, "queries": self.queries}
        row.update({f"hit@{k}": v for k, v in sorted(self.hit_at.items())})
        row.update({
            "mrr": self.mrr, "chunk_s": self.chunk_seconds, "encode_s": self.encode_seconds,
            "sentence_encodings": self.sentence_encodings, "chunks": self.chunk_count,
        })
        return row


def _is_hit(record: ChunkRecord, q: NeedleQuery) -> bool:
    if record.doc_id != q.doc_id:
        return False
    lo, hi = q.span
    return any(lo <= i <= hi for i in record.indices)


def evaluate_index(index: ChunkIndex, queries: Sequence[NeedleQuery], ks=(1, 5, 10)) -> tuple[dict[int, float], float]:
    """hit@k for each k and mean reciprocal rank of the first overlapping chunk."""
    if not queries:
        return {k: 0.0 for k in ks}, 0.0
    hits = {k: 0 for k in ks}
    rr = 0.0
    for q in queries:
        ranked = index.query_top_k(q.vector, len(index))
        first = next((h.rank for h in ranked if _is_hit(h.record, q)), None)
        if first is not None:
            rr += 1.0 / first
            for k in ks:
                hits[k] += first <= k
    n = len(queries)
    return {k: hits[k] / n for k in ks}, rr / n


@dataclass
class SynthConfig:
    docs: int = 20
    sentences_per_doc: int = 64
    queries: int = 200
    needle_granularity: int = 4
    seed: int = 0
    d: int = 16
    token_limit: int = 256
    granularities: tuple[int, ...] = (2, 4, 8, 16, 32)
    train_docs: int = 200
    train_epochs: int = 2
    train_lr: float = 1e-2

    def __post_init__(self):
        if min(self.docs, self.sentences_per_doc, self.needle_granularity, self.d) < 1 or self.queries < 0:
            raise ValueError("synthetic benchmark sizes must be positive")


def train_toy_encoder(d: int, num_docs: int = 200, epochs: int = 2, seed: int = 0,
                      lr: float = 1e-2, granularities=(2, 4, 8, 16, 32),
                      num_layers: int = 2, validation_docs: int = 20) -> TrainResult:
    """Distill an encoder on a synthetic corpus with the mean-pool teacher."""
    rng = np.random.default_rng(seed + 104729)
    embedder = ToyEmbedder(d=d, seed=seed)
    lengths = rng.integers(16, 65, size=num_docs + validation_docs)
    vocab = _vocabulary(np.random.default_rng(seed + 2))
    mats = []
    for n in lengths:
        texts = [" ".join(rng.choice(vocab, size=8)) + "." for _ in range(n)]
        mats.append(embedder.embed(texts))
    cfg = TrainConfig(epochs=epochs, base_lr=lr, seed=seed, granularities=tuple(granularities))
    return train(mats[:num_docs], None, cfg, validation=mats[num_docs:], num_layers=num_layers)


def synth_eval(cfg: SynthConfig, methods: Sequence[str] = METHODS,
               weights: EncoderWeights | None = None) -> list[EvalReport]:
    """Run every method on the same seeded needle benchmark."""
    if cfg.queries == 0:
        return []
    corpus = make_synthetic_corpus(cfg.docs, cfg.sentences_per_doc, cfg.seed)
    embedder = ToyEmbedder(d=cfg.d, seed=cfg.seed)
    run_cfg = Config(seed=cfg.seed, d=cfg.d, granularities=list(cfg.granularities), token_limit=cfg.token_limit)
    if "freechunk" in methods and weights is None:
        weights = train_toy_encoder(cfg.d, cfg.train_docs, cfg.train_epochs, cfg.seed, cfg.train_lr,
                                    cfg.granularities).weights
    reports = []
    queries = None
    for method in methods:
        result = run_pipeline(corpus, method, run_cfg, embedder=embedder, weights=weights)
        if queries is None:
            queries = make_needle_queries(result.documents, embedder, cfg.queries, cfg.needle_granularity, cfg.seed)
        hit_at, mrr = evaluate_index(result.index, queries)
        reports.append(EvalReport(
            method=method, queries=len(queries), hit_at=hit_at, mrr=mrr,
            chunk_seconds=result.chunk_seconds, encode_seconds=result.encode_seconds,
            sentence_encodings=result.trace.sentence_encodings, chunk_count=len(result.index),
            stage_seconds=dict(result.timings),
        ))
    return reports


def format_reports(reports: Sequence[EvalReport]) -> str:
    header = ("Retrieval-only metrics: a hit at k means a top-k chunk overlaps the planted "
              "needle span (no generator involved).")
    lines = [header, f"{'method':<12} {'hit@1':>6} {'hit@5':>6} {'hit@10':>6} {'MRR':>6} "
                     f"{'chunk_s':>8} {'encode_s':>8} {'sent_enc':>8} {'chunks':>7}"]
    for r in reports:
        lines.append(
            f"{r.method:<12} {r.hit_at.get(1, math.nan):6.3f} {r.hit_at.get(5, math.nan):6.3f} "
            f"{r.hit_at.get(10, math.nan):6.3f} {r.mrr:6.3f} {r.chunk_seconds:8.4f} "
            f"{r.encode_seconds:8.4f} {r.sentence_encodings:8d} {r.chunk_count:7d}"
        )
    return "\n".join(lines)


__all__ = [
    "ChunkerError", "CorpusRecord", "EvalReport", "METHODS", "NeedleQuery", "PipelineResult",
    "SynthConfig", "build_embedder", "evaluate_index", "format_reports", "load_corpus",
    "make_needle_queries", "make_synthetic_corpus", "run_pipeline", "synth_eval",
    "train_toy_encoder", "write_jsonl",
]
