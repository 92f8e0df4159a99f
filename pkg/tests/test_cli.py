import csv
import json

import httpx
import pytest

from xgranchunk import cli
from xgranchunk.container import read_header
from xgranchunk.pipeline import make_synthetic_corpus, write_jsonl


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_jsonl(path, [{"id": r.id, "text": r.text} for r in make_synthetic_corpus(4, 20, seed=1)])
    return path


@pytest.fixture
def weights(tmp_path):
    path = tmp_path / "w.bin"
    assert run("train", "--synthetic-docs", 12, "--synthetic-sentences", 16, "--d", 16, "--layers", 1,
               "--epochs", 1, "--lr", 0.01, "--out", path) == 0
    return path


def read_jsonl(path):
    return [json.loads(line) for line in open(path, encoding="utf-8")]


def test_sentencize(tmp_path, corpus):
    out = tmp_path / "s.jsonl"
    assert run("sentencize", "--corpus", corpus, "--out", out) == 0
    rows = read_jsonl(out)
    assert len(rows) == 80 and set(rows[0]) == {"doc_id", "index", "text", "token_count"}


def test_sentencize_to_stdout_with_abbreviations(tmp_path, capsys):
    c = tmp_path / "c.jsonl"
    write_jsonl(c, [{"id": "a", "text": "Foo. Bar baz."}])
    abbr = tmp_path / "abbr.txt"
    abbr.write_text("foo.\n")
    assert run("sentencize", "--corpus", c, "--abbreviations", abbr) == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [r["text"] for r in rows] == ["Foo. Bar baz."]


@pytest.mark.parametrize("method", ["traditional", "semantic"])
def test_chunk_baselines(tmp_path, corpus, method):
    out = tmp_path / "c.jsonl"
    assert run("chunk", "--corpus", corpus, "--method", method, "--token-limit", 60, "--out", out) == 0
    rows = read_jsonl(out)
    by_doc = {}
    for r in rows:
        by_doc.setdefault(r["doc_id"], []).extend(r["indices"])
    assert all(v == list(range(20)) for v in by_doc.values()) and len(by_doc) == 4


def test_chunk_patterns(tmp_path, corpus):
    out = tmp_path / "p.jsonl"
    assert run("chunk", "--corpus", corpus, "--method", "freechunk", "--patterns", "4,8:4", "--out", out) == 0
    rows = read_jsonl(out)
    assert sum(r["doc_id"] == "doc0000" for r in rows) == 5 + 4
    assert run("chunk", "--corpus", corpus, "--method", "freechunk",
               "--explicit-patterns", "[[0, 5], [3]]", "--out", out) == 0
    rows = read_jsonl(out)
    assert [r["indices"] for r in rows[:2]] == [[0, 5], [3]] and rows[0]["contiguous"] is False


def test_train_outputs(tmp_path, weights):
    header = read_header(weights)
    assert header["d"] == 16 and header["layers"] == 1
    meta = header["metadata"]
    assert meta["config"]["lr"] == 0.01 and meta["adamw"]["beta2"] == 0.999
    with open(str(weights) + ".history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "train_loss", "val_loss"]
    assert len(rows) == 1 + 11 and rows[-1][2] != ""


def test_encode_index_query(tmp_path, corpus, weights, capsys):
    enc = tmp_path / "e.jsonl"
    assert run("encode", "--corpus", corpus, "--weights", weights, "--d", 16, "--out", enc) == 0
    # g=2:10, g=4:5, g=8 and g=16 only add {0..7},{8..15} and {0..15} since
    # {16..19} already came from g=4; g=32: the whole document
    assert len(read_jsonl(enc)) == 4 * (10 + 5 + 2 + 1 + 1)
    meta = json.loads((tmp_path / "e.jsonl.meta.json").read_text())
    assert meta["sentence_encodings"] == 80 and meta["forward_passes"] == 4
    idx = tmp_path / "i.jsonl"
    assert run("index", "--corpus", corpus, "--method", "freechunk", "--weights", weights, "--d", 16,
               "--out", idx) == 0
    assert enc.read_bytes() == idx.read_bytes()
    capsys.readouterr()
    vec = json.dumps(read_jsonl(idx)[3]["embedding"])
    assert run("query", "--index", idx, "--vector", vec, "--k", 2, "--corpus", corpus, "--budget", 500) == 0
    out = capsys.readouterr().out.splitlines()
    first = json.loads(out[0])
    assert first["rank"] == 1 and first["score"] == 1.0 and first["indices"] == read_jsonl(idx)[3]["indices"]
    assert out[2].startswith("--- context")


def test_encode_explicit(tmp_path, corpus, weights):
    out = tmp_path / "e.jsonl"
    assert run("encode", "--corpus", corpus, "--weights", weights, "--d", 16,
               "--explicit-patterns", "[[0, 2, 4], [1]]", "--out", out) == 0
    rows = read_jsonl(out)
    assert len(rows) == 8 and rows[0]["indices"] == [0, 2, 4]
    assert run("encode", "--corpus", corpus, "--weights", weights, "--d", 16,
               "--explicit-patterns", "[[0, 99]]", "--out", out) == 2


def test_index_is_deterministic(tmp_path, corpus):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert run("index", "--corpus", corpus, "--method", "semantic", "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.jsonl.meta.json").read_bytes() == (tmp_path / "b.jsonl.meta.json").read_bytes()


def test_eval_and_csv(tmp_path, capsys, weights):
    out = tmp_path / "r.csv"
    capsys.readouterr()
    assert run("eval", "--docs", 3, "--sentences", 20, "--queries", 15, "--d", 16, "--weights", weights,
               "--csv", out) == 0
    text = capsys.readouterr().out
    assert text.startswith("Retrieval-only")
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["traditional", "semantic", "freechunk"]
    assert run("eval", "--queries", 0) == 0


def test_verify_theory(tmp_path, capsys, weights):
    out = tmp_path / "t.csv"
    assert run("verify-theory", "--grid", "0,0.5", "--trials", 500, "--csv", out,
               "--empirical-weights", weights, "--empirical-docs", 2) == 0
    text = capsys.readouterr().out
    assert "worst-case violations: 0" in text and "empirical" in text
    with open(out) as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_bench(capsys, weights):
    assert run("bench", "--docs", 2, "--sentences", 16, "--d", 16, "--weights", weights, "--repeat", 1) == 0
    assert "sentence-equivalents" in capsys.readouterr().out


def test_exit_codes(tmp_path, corpus):
    with pytest.raises(SystemExit) as err:
        run("nonsense")
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        run("chunk", "--corpus", corpus)
    assert err.value.code == 1
    assert run("index", "--corpus", corpus, "--method", "freechunk", "--out", tmp_path / "x") == 1
    assert run("chunk", "--corpus", tmp_path / "missing.jsonl", "--method", "traditional") == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "text": "ok."}\n{oops\n')
    assert run("sentencize", "--corpus", bad) == 2
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text('{"granulariy": [2]}')
    assert run("sentencize", "--corpus", corpus, "--config", cfgfile) == 1


def test_remote_failure_exit_code(tmp_path, corpus, monkeypatch):
    def refuse(self, *a, **k):
        raise httpx.ConnectError("refused")

    monkeypatch.setattr(httpx.Client, "post", refuse)
    monkeypatch.setattr("time.sleep", lambda s: None)
    code = run("index", "--corpus", corpus, "--method", "traditional", "--embedder", "remote",
               "--retries", 1, "--out", tmp_path / "i.jsonl")
    assert code == 3
