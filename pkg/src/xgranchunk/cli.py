"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 remote-service error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import baselines, theory
from .config import Config, config_load
from .container import load_weights, save_weights
from .embedders import CountingEmbedder, ToyEmbedder, prune_dimensions, teacher_chunk_embed
from .encoder import RunTrace, forward, independent_encoding_cost, init_weights
from .errors import ChunkerError, ConfigError, DataError, RemoteError
from .patterns import build_explicit_patterns, build_sliding_patterns, parse_pattern_spec, pattern_to_mask
from .pipeline import (
    METHODS, SynthConfig, abbreviations_for, build_embedder, format_reports, load_corpus,
    make_synthetic_corpus, run_pipeline, synth_eval, write_jsonl,
)
from .retrieval import ChunkIndex, ChunkRecord, assemble_context
from .sentencizer import sentencize
from .training import TrainConfig, mean_pool_teacher, train

log = logging.getLogger("xgranchunk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_REMOTE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int, help="embedding / encoder dimension")
    p.add_argument("--embedder", choices=["toy", "remote"])
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--api-key-env", dest="api_key_env")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--max-concurrency", dest="max_concurrency", type=int)
    p.add_argument("--abbreviations", help="file with one abbreviation per line")
    p.add_argument("--log-level", default="WARNING")


_CONFIG_FLAGS = [
    "seed", "d", "embedder", "base_url", "model", "api_key_env", "batch_size", "timeout",
    "retries", "max_concurrency", "abbreviations", "token_limit", "percentile", "layers",
    "epochs", "lr", "teacher", "top_k", "token_budget", "validation_interval", "weight_decay",
]


def _resolve(args) -> Config:
    flags = {k: getattr(args, k) for k in _CONFIG_FLAGS if hasattr(args, k)}
    pattern = getattr(args, "patterns", None)
    if pattern:
        gs, stride = parse_pattern_spec(pattern)
        flags["granularities"], flags["stride"] = gs, stride
    return config_load(args.config, flags=flags)


def _emit_jsonl(path, rows) -> None:
    if path and path != "-":
        write_jsonl(path, rows)
    else:
        for row in rows:
            sys.stdout.write(json.dumps(row, ensure_ascii=False) + "\n")


def _write_meta(out_path, cfg: Config, extra: dict) -> None:
    if not out_path or out_path == "-":
        return
    meta = {"config": cfg.to_dict(), **extra}
    Path(str(out_path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_explicit(spec: str) -> list[list[int]]:
    text = spec if spec.lstrip().startswith("[") else Path(spec).read_text(encoding="utf-8")
    try:
        sets = json.loads(text)
    except ValueError as exc:
        raise UsageError(f"explicit patterns are not valid JSON: {exc}") from exc
    if not isinstance(sets, list) or not all(isinstance(s, list) for s in sets):
        raise UsageError("explicit patterns must be a JSON list of index lists")
    return sets


def _pattern_set(n: int, cfg: Config, explicit):
    if explicit is not None:
        return build_explicit_patterns(n, explicit)
    return build_sliding_patterns(n, cfg.granularities, cfg.stride)


# -- subcommands ------------------------------------------------------------


def cmd_sentencize(args) -> int:
    cfg = _resolve(args)
    abbrevs = abbreviations_for(cfg)
    rows = []
    for rec in load_corpus(args.corpus):
        doc = sentencize(rec.id, rec.text, abbrevs)
        rows.extend({"doc_id": doc.id, "index": s.index, "text": s.text, "token_count": s.token_count}
                    for s in doc.sentences)
    _emit_jsonl(args.out, rows)
    return EXIT_OK


def cmd_chunk(args) -> int:
    cfg = _resolve(args)
    abbrevs = abbreviations_for(cfg)
    explicit = _load_explicit(args.explicit_patterns) if args.explicit_patterns else None
    embedder = build_embedder(cfg) if args.method == "semantic" else None
    rows = []
    for rec in load_corpus(args.corpus):
        doc = sentencize(rec.id, rec.text, abbrevs)
        if doc.n == 0:
            continue
        try:
            if args.method == "traditional":
                chunks = baselines.traditional_chunk(doc, cfg.token_limit)
            elif args.method == "semantic":
                chunks = baselines.semantic_chunk(doc, embedder, cfg.percentile)
            else:
                ps = _pattern_set(doc.n, cfg, explicit)
                for p in ps:
                    rows.append({
                        "doc_id": doc.id, "indices": list(p.sentence_indices), "g": p.granularity,
                        "s": p.start, "contiguous": p.contiguous,
                        "text": " ".join(doc.sentences[i].text for i in p.sentence_indices),
                        "token_count": sum(doc.sentences[i].token_count for i in p.sentence_indices),
                    })
                continue
        except DataError as exc:
            raise DataError(f"document {doc.id}: {exc}") from exc
        rows.extend({"doc_id": c.doc_id, "indices": list(c.indices), "g": c.size, "s": c.first,
                     "text": c.text, "token_count": c.token_count} for c in chunks)
    _emit_jsonl(args.out, rows)
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _resolve(args)
    weights, wmeta = load_weights(args.weights)
    explicit = _load_explicit(args.explicit_patterns) if args.explicit_patterns else None
    if explicit is None:
        result = run_pipeline(load_corpus(args.corpus), "freechunk", cfg, weights=weights, index_path=args.out)
        n_records, trace = len(result.index), result.trace
    else:
        trace = RunTrace()
        embedder = CountingEmbedder(build_embedder(cfg), trace)
        records = []
        for rec in load_corpus(args.corpus):
            doc = sentencize(rec.id, rec.text, abbreviations_for(cfg))
            try:
                ps = build_explicit_patterns(doc.n, explicit)
            except DataError as exc:
                raise DataError(f"document {doc.id}: {exc}") from exc
            E = embedder.embed(doc.sentence_texts())
            if E.shape[1] > weights.d:
                E = prune_dimensions(E, weights.d)
            out = forward(weights, E, pattern_to_mask(ps), pattern_set=ps, trace=trace)
            records.extend(ChunkRecord(doc.id, p.sentence_indices, row) for p, row in zip(ps, out.matrix))
        index = ChunkIndex(records)
        index.save(args.out)
        n_records = len(index)
    _write_meta(args.out, cfg, {"weights": str(args.weights), "weights_metadata": wmeta,
                                "records": n_records, "sentence_encodings": trace.sentence_encodings,
                                "forward_passes": trace.forward_passes})
    print(f"wrote {n_records} chunk records to {args.out} "
          f"({trace.sentence_encodings} sentence encodings, {trace.forward_passes} forward passes)")
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = _resolve(args)
    weights = None
    if args.method == "freechunk":
        if not args.weights:
            raise UsageError("--weights is required for --method freechunk")
        weights, _ = load_weights(args.weights)
    result = run_pipeline(load_corpus(args.corpus), args.method, cfg, weights=weights, index_path=args.out)
    _write_meta(args.out, cfg, {"method": args.method, "records": len(result.index),
                                "sentence_encodings": result.trace.sentence_encodings})
    timings = " ".join(f"{k}={v:.4f}s" for k, v in result.timings.items())
    print(f"{args.method}: {len(result.index)} records, {result.trace.sentence_encodings} "
          f"sentence encodings; {timings}; total={result.total_seconds:.4f}s")
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = _resolve(args)
    index = ChunkIndex.load(args.index)
    if args.vector:
        q = np.asarray(json.loads(args.vector), dtype=np.float32)
    else:
        q = build_embedder(cfg).embed([args.text])[0]
    hits = index.query_top_k(q, cfg.top_k)
    for h in hits:
        print(json.dumps({"rank": h.rank, "score": round(h.score, 6), "doc_id": h.record.doc_id,
                          "indices": list(h.record.indices), "g": h.record.granularity}))
    if args.corpus:
        abbrevs = abbreviations_for(cfg)
        sentences = {r.id: sentencize(r.id, r.text, abbrevs).sentences for r in load_corpus(args.corpus)}
        ctx = assemble_context(hits, sentences, cfg.token_budget)
        if ctx.warning:
            print(f"warning: {ctx.warning}", file=sys.stderr)
        print(f"--- context ({ctx.token_total} tokens from {ctx.hits_used} hits) ---")
        print(ctx.render())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    embedder = build_embedder(cfg)
    if args.corpus:
        docs = [sentencize(r.id, r.text, abbreviations_for(cfg)) for r in load_corpus(args.corpus)]
    else:
        corpus = make_synthetic_corpus(args.synthetic_docs, args.synthetic_sentences, cfg.seed)
        docs = [sentencize(r.id, r.text) for r in corpus]
    docs = [d for d in docs if d.n > 0]
    if len(docs) < 2:
        raise DataError("training needs at least two non-empty documents")
    mats = [embedder.embed(d.sentence_texts()) for d in docs]
    d = cfg.d if cfg.embedder == "toy" else min(cfg.d, mats[0].shape[1])
    if mats[0].shape[1] > d:
        mats = [prune_dimensions(m, d) for m in mats]

    n_val = max(1, int(round(len(docs) * args.val_fraction)))
    train_docs, val_docs = docs[:-n_val], docs[-n_val:]
    train_mats, val_mats = mats[:-n_val], mats[-n_val:]

    if cfg.teacher == "mean-pool":
        provider = None
    else:
        # positions run over the training documents, then the validation ones
        def provider(pos, E, ps):
            texts = docs[pos].sentence_texts()
            rows = [teacher_chunk_embed(E, p, "remote-concat", texts=texts, embedder=embedder) for p in ps]
            out = np.stack(rows).astype(np.float64)
            if out.shape[1] > E.shape[1]:
                out = out[:, :E.shape[1]]
            return out / np.linalg.norm(out, axis=1, keepdims=True)

    tcfg = TrainConfig(epochs=cfg.epochs, base_lr=cfg.lr, seed=cfg.seed,
                       granularities=tuple(cfg.granularities), stride=cfg.stride,
                       validation_interval=cfg.validation_interval, weight_decay=cfg.weight_decay)
    weights = init_weights(d, cfg.layers, seed=cfg.seed)
    result = train(train_mats, provider, tcfg, validation=val_mats, weights=weights)
    meta = {"config": cfg.to_dict(), "train_docs": len(train_docs), "val_docs": len(val_docs),
            "final_val_loss": result.final_val_loss, "teacher": cfg.teacher,
            "teacher_joiner": " " if cfg.teacher == "remote" else None,
            "adamw": {"beta1": tcfg.beta1, "beta2": tcfg.beta2, "eps": tcfg.eps,
                      "weight_decay": tcfg.weight_decay}}
    save_weights(result.weights, args.out, metadata=meta)
    history_path = args.history or str(args.out) + ".history.csv"
    with open(history_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_loss"])
        for step, tl, vl in result.history:
            w.writerow([step, f"{tl:.8f}", "" if math.isnan(vl) else f"{vl:.8f}"])
    print(f"trained {len(result.history)} steps; final validation loss {result.final_val_loss:.5f}; "
          f"weights -> {args.out}; history -> {history_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    scfg = SynthConfig(docs=args.docs, sentences_per_doc=args.sentences, queries=args.queries,
                       needle_granularity=args.needle_granularity, seed=cfg.seed,
                       d=args.d or SynthConfig.d, token_limit=cfg.token_limit,
                       granularities=tuple(cfg.granularities))
    weights = load_weights(args.weights)[0] if args.weights else None
    methods = args.methods.split(",") if args.methods else list(METHODS)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}")
    reports = synth_eval(scfg, methods, weights)
    print(format_reports(reports))
    if args.csv:
        _write_csv(args.csv, [r.as_row() for r in reports])
    return EXIT_OK


def _write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_verify_theory(args) -> int:
    grid = _float_list(args.grid)
    reports = theory.verify_grid(grid, args.trials, seed=args.seed or 0, d=args.dim, workers=args.workers)
    rows = [r.as_row() for r in reports]
    lines = [f"{'s':>5} {'rho':>5} {'max_eps':>9} {'wc_bound':>9} {'mean_eps':>9} {'exp_bound':>9} "
             f"{'viol':>5} {'|cos phi|':>9}"]
    for r in reports:
        lines.append(f"{r.s:5.2f} {r.rho:5.2f} {r.max_loss:9.5f} {r.worst_case_bound:9.5f} "
                     f"{r.mean_loss:9.5f} {r.expected_bound:9.5f} {r.violations:5d} {r.mean_abs_cos_phi:9.5f}")
    total = sum(r.violations for r in reports)
    exp_ok = all(r.expected_ok for r in reports)
    lines.append(f"worst-case violations: {total}; expected bound holds in every cell: {exp_ok}")
    if args.empirical_weights:
        lines.append(_empirical_section(args))
    print("\n".join(lines))
    if args.csv:
        _write_csv(args.csv, rows)
    return EXIT_OK


def _empirical_section(args) -> str:
    weights, _ = load_weights(args.empirical_weights)
    embedder = ToyEmbedder(d=weights.d, seed=args.seed or 0)
    corpus = make_synthetic_corpus(args.empirical_docs, 64, seed=(args.seed or 0) + 1)
    rng = np.random.default_rng(args.seed or 0)
    points = []
    for rec in corpus:
        doc = sentencize(rec.id, rec.text)
        E = embedder.embed(doc.sentence_texts())
        ps = build_sliding_patterns(doc.n)
        teacher = mean_pool_teacher(E, ps)
        approx = forward(weights, E, pattern_to_mask(ps)).matrix
        picks = rng.choice(ps.m, size=min(8, ps.m), replace=False)
        queries = teacher[rng.permutation(ps.m)[:8]]
        points.extend(theory.empirical_check(teacher[picks], approx[picks], queries).points)
    rep = theory.EmpiricalReport(points)
    return (f"empirical ({len(points)} pairs): mean eps {rep.mean_loss:.5f}, mean expected bound "
            f"{rep.mean_expected_bound:.5f}, worst-case violations {rep.violations}, "
            f"mean |cos phi| {rep.mean_abs_cos_phi:.4f} (uniform azimuth gives {2 / math.pi:.4f})")


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = make_synthetic_corpus(args.docs, args.sentences, cfg.seed)
    weights = load_weights(args.weights)[0] if args.weights else init_weights(cfg.d, cfg.layers, cfg.seed)
    print(f"{'method':<12} {'total_s':>8} {'chunk_s':>8} {'encode_s':>8} {'sent_enc':>8} {'chunks':>7}")
    for method in METHODS:
        best = None
        for _ in range(args.repeat):
            r = run_pipeline(corpus, method, cfg, weights=weights)
            if best is None or r.total_seconds < best.total_seconds:
                best = r
        print(f"{method:<12} {best.total_seconds:8.4f} {best.chunk_seconds:8.4f} {best.encode_seconds:8.4f} "
              f"{best.trace.sentence_encodings:8d} {len(best.index):7d}")
        if method == "freechunk":
            redundant = sum(independent_encoding_cost(build_sliding_patterns(d.n, cfg.granularities, cfg.stride))
                            for d in best.documents)
            print(f"{'':<12} encoding every pattern separately would cost {redundant} sentence-equivalents")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xgranchunk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sentencize", help="split a JSONL corpus into sentences")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sentencize)

    p = sub.add_parser("chunk", help="chunk a corpus with a baseline or emit pattern sets")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--token-limit", dest="token_limit", type=int)
    p.add_argument("--percentile", type=float)
    p.add_argument("--patterns", help='granularities "g1,g2,...[:stride]"')
    p.add_argument("--explicit-patterns", help="JSON list of index lists (inline or file)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("encode", help="run the trained encoder over a corpus")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--patterns")
    p.add_argument("--explicit-patterns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="distill the encoder")
    _common(p)
    p.add_argument("--corpus", help="JSONL corpus; omit to use a synthetic one")
    p.add_argument("--synthetic-docs", type=int, default=220)
    p.add_argument("--synthetic-sentences", type=int, default=48)
    p.add_argument("--teacher", choices=["mean-pool", "remote"])
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--validation-interval", dest="validation_interval", type=int)
    p.add_argument("--patterns")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--history", help="loss-history CSV (default: <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build a retrieval index with one method")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--weights")
    p.add_argument("--token-limit", dest="token_limit", type=int)
    p.add_argument("--percentile", type=float)
    p.add_argument("--patterns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="top-k retrieval against an index")
    _common(p)
    p.add_argument("--index", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--vector", help="query embedding as a JSON list")
    p.add_argument("--k", dest="top_k", type=int)
    p.add_argument("--corpus", help="corpus JSONL; enables context assembly")
    p.add_argument("--budget", dest="token_budget", type=int)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="synthetic needle benchmark across methods")
    _common(p)
    p.add_argument("--docs", type=int, default=SynthConfig.docs)
    p.add_argument("--sentences", type=int, default=SynthConfig.sentences_per_doc)
    p.add_argument("--queries", type=int, default=SynthConfig.queries)
    p.add_argument("--needle-granularity", type=int, default=SynthConfig.needle_granularity)
    p.add_argument("--token-limit", dest="token_limit", type=int)
    p.add_argument("--patterns")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--weights", help="trained encoder; a toy encoder is trained if omitted")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theory", help="Monte Carlo check of the substitution-loss bounds")
    p.add_argument("--grid", default="0,0.25,0.5,0.75,0.9,0.99", help="values used for both s and rho")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv")
    p.add_argument("--empirical-weights", help="also measure losses on this trained encoder")
    p.add_argument("--empirical-docs", type=int, default=10)
    p.add_argument("--log-level", default="WARNING")
    p.set_defaults(func=cmd_verify_theory, config=None)

    p = sub.add_parser("bench", help="time every method on a corpus")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--docs", type=int, default=20)
    p.add_argument("--sentences", type=int, default=64)
    p.add_argument("--weights")
    p.add_argument("--layers", type=int)
    p.add_argument("--token-limit", dest="token_limit", type=int)
    p.add_argument("--patterns")
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RemoteError as exc:
        print(f"remote error: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ChunkerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
