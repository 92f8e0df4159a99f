"""Sentence and span embedders.

``ToyEmbedder`` is hermetic: a sentence maps to a pseudo-random unit vector
derived from a keyed BLAKE2b hash of its text, and a multi-sentence text maps
to the normalized mean of its sentences' vectors. ``RemoteEmbedder`` talks to
any OpenAI-compatible ``/embeddings`` endpoint.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import struct
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .encoder import RunTrace
from .errors import EmptyBatch, MalformedResponse, RemoteRejected, RemoteUnavailable
from .numerics import l2_normalize_rows
from .patterns import ChunkPattern
from .sentencizer import split_sentences

log = logging.getLogger(__name__)


class Embedder(Protocol):
    name: str

    @property
    def dim(self) -> int: ...

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _normalized_bytes(text: str) -> bytes:
    return unicodedata.normalize("NFC", text).strip().encode("utf-8")


def toy_embed(text: str, d: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector for ``text``; identical text gives identical output
    on every platform (Box-Muller over BLAKE2b counter-mode output)."""
    if d < 2:
        raise ValueError("toy_embed needs d >= 2")
    key = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
    payload = _normalized_bytes(text)
    words_needed = 2 * math.ceil(d / 2)
    words: list[int] = []
    counter = 0
    while len(words) < words_needed:
        h = hashlib.blake2b(payload, digest_size=64, key=key, person=counter.to_bytes(16, "little"))
        words.extend(struct.unpack("<8Q", h.digest()))
        counter += 1
    u = (np.array(words[:words_needed], dtype=np.float64) + 0.5) / 2.0**64
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(words_needed)
    z[0::2] = r * np.cos(2 * math.pi * u2)
    z[1::2] = r * np.sin(2 * math.pi * u2)
    z = z[:d]
    return (z / np.linalg.norm(z)).astype(np.float32)


@dataclass
class ToyEmbedder:
    d: int = 64
    seed: int = 0
    name: str = "toy"

    @property
    def dim(self) -> int:
        return self.d

    def embed_sentence(self, text: str) -> np.ndarray:
        return toy_embed(text, self.d, self.seed)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            parts = [s.text for s in split_sentences(text)]
            if len(parts) <= 1:
                rows.append(self.embed_sentence(text))
            else:
                rows.append(np.mean([self.embed_sentence(p) for p in parts], axis=0))
        if not rows:
            return np.zeros((0, self.d), np.float32)
        return l2_normalize_rows(np.stack(rows)).astype(np.float32)


class CountingEmbedder:
    """Wraps an embedder and records how many sentence-equivalents it encoded."""

    def __init__(self, inner, trace: RunTrace | None = None):
        self.inner = inner
        self.trace = trace if trace is not None else RunTrace()
        self.name = inner.name

    @property
    def dim(self) -> int:
        return self.inner.dim

    def embed(self, texts: Sequence[str], sentence_counts: Sequence[int] | None = None) -> np.ndarray:
        self.trace.sentence_encodings += len(texts) if sentence_counts is None else int(sum(sentence_counts))
        return self.inner.embed(texts)


def prune_dimensions(E: np.ndarray, d: int) -> np.ndarray:
    """Keep the first ``d`` columns and re-normalize rows."""
    E = np.asarray(E)
    if d > E.shape[1]:
        raise ValueError(f"cannot prune {E.shape[1]}-dim embeddings up to {d}")
    if d == E.shape[1]:
        return E
    return l2_normalize_rows(E[:, :d]).astype(E.dtype)


def teacher_chunk_embed(E: np.ndarray, pattern: ChunkPattern, mode: str = "mean-pool", *,
                        texts: Sequence[str] | None = None, embedder=None) -> np.ndarray:
    """Target embedding for one pattern.

    ``mean-pool``: normalized mean of the pattern's rows of ``E``.
    ``remote-concat``: embed the pattern's sentence texts joined by single spaces.
    """
    idx = list(pattern.sentence_indices)
    if mode == "mean-pool":
        mean = np.asarray(E, dtype=np.float64)[idx].mean(axis=0)
        return (mean / np.linalg.norm(mean)).astype(np.float32)
    if mode == "remote-concat":
        if texts is None or embedder is None:
            raise ValueError("remote-concat teacher needs sentence texts and an embedder")
        return embedder.embed([" ".join(texts[i] for i in idx)])[0]
    raise ValueError(f"unknown teacher mode {mode!r}")


# -- remote ---------------------------------------------------------------

RETRYABLE = {429, 500, 502, 503, 504}


@dataclass
class RemoteEmbedderConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "text-embedding"
    api_key_env: str = "EMBEDDINGS_API_KEY"
    batch_size: int = 64
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_concurrency: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0 or self.max_concurrency < 1:
            raise ValueError("retries must be >= 0 and max_concurrency >= 1")


def _parse_response(payload, expected: int) -> np.ndarray:
    try:
        data = payload["data"]
        pairs = [(int(item["index"]), item["embedding"]) for item in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"unexpected response shape: {exc!r}") from exc
    pairs.sort(key=lambda p: p[0])
    if [i for i, _ in pairs] != list(range(expected)):
        raise MalformedResponse(f"expected indices 0..{expected - 1}, got {[i for i, _ in pairs]}")
    dims = {len(vec) for _, vec in pairs}
    if len(dims) != 1:
        raise MalformedResponse(f"inconsistent embedding dimensions {sorted(dims)}")
    arr = np.asarray([vec for _, vec in pairs], dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(np.linalg.norm(arr, axis=1) == 0):
        raise MalformedResponse("response contains non-finite or zero vectors")
    return l2_normalize_rows(arr).astype(np.float32)


def _post_with_retry(client: httpx.Client, cfg: RemoteEmbedderConfig, texts: list[str],
                     headers: dict, sleep: Callable[[float], None]) -> np.ndarray:
    url = cfg.base_url.rstrip("/") + "/embeddings"
    body = {"model": cfg.model, "input": texts}
    last = ""
    for attempt in range(cfg.retries + 1):
        if attempt:
            sleep(cfg.backoff * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=body, headers=headers, timeout=cfg.timeout)
        except httpx.TimeoutException as exc:
            last = f"timeout: {exc}"
            continue
        except httpx.TransportError as exc:
            last = f"transport error: {exc}"
            continue
        if resp.status_code in RETRYABLE:
            last = f"HTTP {resp.status_code}"
            log.warning("embedding request failed (%s), attempt %d", last, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise RemoteRejected(resp.status_code, resp.text[:200])
        try:
            payload = resp.json()
        except ValueError as exc:
            raise MalformedResponse("response is not JSON") from exc
        return _parse_response(payload, len(texts))
    raise RemoteUnavailable(f"gave up after {cfg.retries + 1} attempts ({last})")


def remote_embed_batch(texts: Sequence[str], cfg: RemoteEmbedderConfig, *,
                       client: httpx.Client | None = None,
                       sleep: Callable[[float], None] = time.sleep) -> np.ndarray:
    """Embed ``texts`` remotely; rows come back in input order, unit-normalized."""
    texts = list(texts)
    if not texts:
        raise EmptyBatch("no texts to embed")
    headers = {}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    batches = [texts[i:i + cfg.batch_size] for i in range(0, len(texts), cfg.batch_size)]
    own = client is None
    client = client or httpx.Client()
    try:
        if cfg.max_concurrency > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
                parts = list(pool.map(lambda b: _post_with_retry(client, cfg, b, headers, sleep), batches))
        else:
            parts = [_post_with_retry(client, cfg, b, headers, sleep) for b in batches]
    finally:
        if own:
            client.close()
    if len({p.shape[1] for p in parts}) != 1:
        raise MalformedResponse("embedding dimension changed between batches")
    return np.concatenate(parts, axis=0)


class RemoteEmbedder:
    def __init__(self, cfg: RemoteEmbedderConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.client = client
        self.sleep = sleep
        self.name = f"remote:{cfg.model}"
        self._dim: int | None = None

    @property
    def dim(self) -> int:
        if self._dim is None:
            self._dim = self.embed(["dimension probe"]).shape[1]
        return self._dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = remote_embed_batch(texts, self.cfg, client=self.client, sleep=self.sleep)
        self._dim = out.shape[1]
        return out
