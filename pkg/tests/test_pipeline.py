import json

import numpy as np
import pytest

from xgranchunk.config import Config
from xgranchunk.embedders import ToyEmbedder
from xgranchunk.encoder import init_weights
from xgranchunk.errors import DataError, ParseError
from xgranchunk.pipeline import (
    CorpusRecord, NeedleQuery, SynthConfig, evaluate_index, format_reports, load_corpus,
    make_needle_queries, make_synthetic_corpus, run_pipeline, synth_eval, write_jsonl,
)
from xgranchunk.retrieval import ChunkIndex, ChunkRecord
from xgranchunk.sentencizer import sentencize


@pytest.fixture
def cfg():
    return Config(d=16)


def test_load_corpus_errors(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"id": "a", "text": "Hi."}\n\n{"id": "b", "text": "Yo."}\nnot json\n')
    with pytest.raises(ParseError) as err:
        load_corpus(path)
    assert err.value.line == 4
    path.write_text('{"id": "a", "text": "Hi."}\n{"id": "a", "text": "Again."}\n')
    with pytest.raises(ParseError, match="duplicate") as err:
        load_corpus(path)
    assert err.value.line == 2
    path.write_text('{"id": "a", "text": "   "}\n')
    with pytest.raises(ParseError, match="empty"):
        load_corpus(path)
    path.write_text('{"id": "a"}\n')
    with pytest.raises(ParseError):
        load_corpus(path)


def test_write_and_load_round_trip(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [{"id": "x", "text": "Ünïcode here."}, {"id": 7, "text": "Numbers."}])
    assert load_corpus(path) == [CorpusRecord("x", "Ünïcode here."), CorpusRecord("7", "Numbers.")]


def test_traditional_one_document(cfg):
    corpus = [CorpusRecord("only", "First one. Second one. Third!")]
    res = run_pipeline(corpus, "traditional", cfg)
    assert len(res.index) == 1 and res.index.records[0].indices == (0, 1, 2)
    assert res.total_seconds > 0 and all(v >= 0 for v in res.timings.values())
    assert res.trace.sentence_encodings == 3


def test_freechunk_sixty_four_sentences(cfg):
    corpus = make_synthetic_corpus(1, 64, seed=3)
    assert sentencize("x", corpus[0].text).n == 64
    res = run_pipeline(corpus, "freechunk", cfg, weights=init_weights(16, seed=0))
    assert len(res.index) == 62
    assert res.trace.sentence_encodings == 64
    assert res.trace.forward_passes == 1 and res.trace.chunk_rows == 62
    assert sorted({r.granularity for r in res.index.records}) == [2, 4, 8, 16, 32]


def test_freechunk_requires_weights(cfg):
    with pytest.raises(ValueError):
        run_pipeline([CorpusRecord("a", "Hi.")], "freechunk", cfg)
    with pytest.raises(ValueError):
        run_pipeline([CorpusRecord("a", "Hi.")], "magic", cfg)


def test_wider_embeddings_are_pruned(cfg):
    corpus = make_synthetic_corpus(2, 10, seed=1)
    res = run_pipeline(corpus, "freechunk", cfg, embedder=ToyEmbedder(d=32), weights=init_weights(16, seed=0))
    assert res.index.records[0].embedding.shape == (16,)


def test_errors_carry_document_id(cfg):
    corpus = [CorpusRecord("fine", "Ok."), CorpusRecord("bad", "Also ok. Two.")]
    with pytest.raises(DataError, match="document bad"):
        run_pipeline(corpus, "freechunk", cfg, weights=init_weights(16, seed=0), embedder=_NanEmbedder(16))


class _NanEmbedder:
    name = "nan"

    def __init__(self, d):
        self.dim = d
        self.calls = 0

    def embed(self, texts):
        self.calls += 1
        out = np.full((len(texts), self.dim), 0.25, np.float32)
        if self.calls > 1:
            out[0, 0] = np.nan
        return out


@pytest.mark.parametrize("method", ["traditional", "semantic", "freechunk"])
def test_deterministic_index_bytes(tmp_path, cfg, method):
    corpus = make_synthetic_corpus(4, 30, seed=2)
    w = init_weights(16, seed=1)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run_pipeline(corpus, method, cfg, weights=w, index_path=a)
    run_pipeline(corpus, method, cfg, weights=w, index_path=b)
    assert a.read_bytes() == b.read_bytes() and a.stat().st_size > 0


def test_stage_timings_account_for_total(cfg):
    corpus = make_synthetic_corpus(40, 64, seed=5)
    res = run_pipeline(corpus, "freechunk", cfg, weights=init_weights(16, seed=0))
    assert set(res.timings) == {"sentencize", "chunk", "embed", "encode", "index"}
    assert abs(sum(res.timings.values()) - res.total_seconds) <= 0.1 * res.total_seconds
    assert res.chunk_seconds > 0 and res.encode_seconds > 0


def test_synthetic_corpus_is_stable():
    a = make_synthetic_corpus(3, 12, seed=4)
    assert a == make_synthetic_corpus(3, 12, seed=4)
    assert a != make_synthetic_corpus(3, 12, seed=5)
    assert all(sentencize(r.id, r.text).n == 12 for r in a)


def test_needle_queries():
    docs = [sentencize(r.id, r.text) for r in make_synthetic_corpus(3, 10, seed=0)]
    emb = ToyEmbedder(d=16)
    qs = make_needle_queries(docs, emb, 25, 4, seed=1)
    assert len(qs) == 25
    for q in qs:
        assert q.span[1] - q.span[0] == 3 and 0 <= q.span[0] <= 6
        np.testing.assert_allclose(np.linalg.norm(q.vector), 1, atol=1e-6)
    with pytest.raises(DataError):
        make_needle_queries(docs, emb, 1, 11)


def test_exact_match_queries_hit_at_one():
    emb = ToyEmbedder(d=16)
    vecs = emb.embed(["Aa bb.", "Cc dd.", "Ee ff."])
    idx = ChunkIndex([ChunkRecord("d", (i,), v) for i, v in enumerate(vecs)])
    queries = [NeedleQuery("d", (i, i), v) for i, v in enumerate(vecs)]
    hit_at, mrr = evaluate_index(idx, queries)
    assert hit_at == {1: 1.0, 5: 1.0, 10: 1.0} and mrr == 1.0


def test_evaluate_index_mrr_by_hand():
    e = np.eye(3, dtype=np.float32)
    idx = ChunkIndex([ChunkRecord("d", (0, 1), e[0]), ChunkRecord("d", (2, 3), e[1]), ChunkRecord("x", (0,), e[2])])
    # the first matching record for span (2,3) sits at rank 2
    q = NeedleQuery("d", (2, 3), np.array([0.9, 0.1, 0.0], np.float32) / np.float32(np.hypot(0.9, 0.1)))
    hit_at, mrr = evaluate_index(idx, [q])
    assert hit_at == {1: 0.0, 5: 1.0, 10: 1.0} and mrr == 0.5
    assert evaluate_index(idx, []) == ({1: 0.0, 5: 0.0, 10: 0.0}, 0.0)


def test_synth_eval_small():
    cfg = SynthConfig(docs=4, sentences_per_doc=24, queries=30, train_docs=30, train_epochs=1)
    reports = synth_eval(cfg)
    assert [r.method for r in reports] == ["traditional", "semantic", "freechunk"]
    for r in reports:
        assert r.queries == 30
        assert 0 <= r.hit_at[1] <= r.hit_at[5] <= r.hit_at[10] <= 1
        assert 0 <= r.mrr <= 1 and r.chunk_seconds >= 0 and r.encode_seconds >= 0
    fc = reports[-1]
    assert fc.sentence_encodings == 4 * 24
    text = format_reports(reports)
    assert text.startswith("Retrieval-only") and "freechunk" in text
    row = fc.as_row()
    assert row["hit@5"] == fc.hit_at[5] and row["chunks"] == fc.chunk_count


def test_synth_eval_zero_queries():
    assert synth_eval(SynthConfig(queries=0)) == []


def test_report_row_serializes():
    cfg = SynthConfig(docs=2, sentences_per_doc=8, queries=5)
    rows = [r.as_row() for r in synth_eval(cfg, methods=["traditional"])]
    json.dumps(rows)
