"""Cross-granularity encoder.

Each layer attends from ``m`` chunk query rows to the ``n`` sentence
embeddings, with the pattern mask restricting row ``i`` to the sentences of
pattern ``i``::

    H   = prev + h_chk            (prev = 0 for the first layer)
    A   = softmax(H Wq (E Wk)^T / sqrt(d) + P)
    U   = LN1(H + A (E Wv))
    Y   = LN2(U + FFN(U))

Keys and values always come from the original sentence embeddings ``E``,
so a sentence outside pattern ``i`` can never influence row ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .errors import NonFiniteInput, ShapeMismatch
from .patterns import PatternSet

PARAM_NAMES = (
    "w_q", "w_k", "w_v", "h_chk",
    "ln1_gain", "ln1_bias",
    "w1", "b1", "w2", "b2",
    "ln2_gain", "ln2_bias",
)


@dataclass
class EncoderLayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    h_chk: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    @property
    def d(self) -> int:
        return self.h_chk.shape[0]

    def check(self) -> None:
        d = self.d
        d_ff = self.w1.shape[1]
        expected = {
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "h_chk": (d,),
            "ln1_gain": (d,), "ln1_bias": (d,), "w1": (d, d_ff), "b1": (d_ff,),
            "w2": (d_ff, d), "b2": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInput(f"{name} contains non-finite values")

    def astype(self, dtype) -> "EncoderLayerWeights":
        return EncoderLayerWeights(**{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})


@dataclass
class EncoderWeights:
    layers: list[EncoderLayerWeights]
    normalize_output: bool = True

    @property
    def d(self) -> int:
        return self.layers[0].d

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def check(self) -> None:
        if not self.layers:
            raise ShapeMismatch("encoder needs at least one layer")
        for layer in self.layers:
            if layer.d != self.d:
                raise ShapeMismatch("all layers must share the embedding dimension")
            layer.check()

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Flat ``{"layers.<i>.<name>": array}`` view (arrays are shared, not copied)."""
        return {
            f"layers.{i}.{name}": getattr(layer, name)
            for i, layer in enumerate(self.layers)
            for name in PARAM_NAMES
        }

    @classmethod
    def from_named_parameters(cls, params: dict[str, np.ndarray], normalize_output: bool = True) -> "EncoderWeights":
        num_layers = 1 + max(int(key.split(".")[1]) for key in params)
        layers = [
            EncoderLayerWeights(**{name: params[f"layers.{i}.{name}"] for name in PARAM_NAMES})
            for i in range(num_layers)
        ]
        return cls(layers=layers, normalize_output=normalize_output)

    def copy(self) -> "EncoderWeights":
        return EncoderWeights.from_named_parameters(
            {k: v.copy() for k, v in self.named_parameters().items()}, self.normalize_output
        )

    def astype(self, dtype) -> "EncoderWeights":
        return replace(self, layers=[layer.astype(dtype) for layer in self.layers])


def init_weights(d: int, num_layers: int = 2, seed: int = 0, ffn_mult: int = 4,
                 normalize_output: bool = True) -> EncoderWeights:
    """Random initialization: projections ~ N(0, 1/fan_in), h_chk ~ N(0, 0.02^2),
    layer norms start as identity maps."""
    if d < 1 or num_layers < 1:
        raise ValueError("d and num_layers must be positive")
    rng = np.random.default_rng(seed)
    d_ff = ffn_mult * d

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    layers = []
    for _ in range(num_layers):
        layers.append(
            EncoderLayerWeights(
                w_q=normal((d, d), 1 / math.sqrt(d)),
                w_k=normal((d, d), 1 / math.sqrt(d)),
                w_v=normal((d, d), 1 / math.sqrt(d)),
                h_chk=normal((d,), 0.02),
                ln1_gain=np.ones(d, np.float32),
                ln1_bias=np.zeros(d, np.float32),
                w1=normal((d, d_ff), 1 / math.sqrt(d)),
                b1=np.zeros(d_ff, np.float32),
                w2=normal((d_ff, d), 1 / math.sqrt(d_ff)),
                b2=np.zeros(d, np.float32),
                ln2_gain=np.ones(d, np.float32),
                ln2_bias=np.zeros(d, np.float32),
            )
        )
    return EncoderWeights(layers=layers, normalize_output=normalize_output)


@dataclass
class LayerCache:
    H: np.ndarray
    K: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    R1: np.ndarray
    U: np.ndarray
    Z1: np.ndarray
    G: np.ndarray
    R2: np.ndarray
    Y: np.ndarray


@dataclass
class ChunkEmbeddings:
    matrix: np.ndarray
    pattern_set: PatternSet | None = None
    caches: list[LayerCache] = field(default_factory=list, repr=False)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


@dataclass
class RunTrace:
    """Counters filled in by an instrumented indexing run."""

    sentence_encodings: int = 0
    forward_passes: int = 0
    chunk_rows: int = 0


def count_sentence_encodings(trace: RunTrace) -> int:
    return trace.sentence_encodings


def independent_encoding_cost(ps: PatternSet) -> int:
    """Sentence-equivalents needed to encode every pattern's text separately."""
    return sum(p.granularity for p in ps.patterns)


def _layer_forward(layer: EncoderLayerWeights, H: np.ndarray, E: np.ndarray, mask: np.ndarray,
                   keep_cache: bool):
    d = E.shape[1]
    Q = nx.matmul(H, layer.w_q)
    K = nx.matmul(E, layer.w_k)
    V = nx.matmul(E, layer.w_v)
    A = nx.masked_softmax_rows(nx.matmul(Q, K.T) / math.sqrt(d), mask)
    R1 = H + nx.matmul(A, V)
    U = nx.layer_norm(R1, layer.ln1_gain, layer.ln1_bias)
    Z1 = nx.matmul(U, layer.w1) + layer.b1
    G = nx.gelu(Z1)
    R2 = U + nx.matmul(G, layer.w2) + layer.b2
    Y = nx.layer_norm(R2, layer.ln2_gain, layer.ln2_bias)
    cache = LayerCache(H, K, V, Q, A, R1, U, Z1, G, R2, Y) if keep_cache else None
    return Y, cache


def attention_output(layer: EncoderLayerWeights, H: np.ndarray, E: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pre-residual attention output ``A (E Wv)`` for one layer."""
    d = E.shape[1]
    Q = nx.matmul(H, layer.w_q)
    K = nx.matmul(E, layer.w_k)
    A = nx.masked_softmax_rows(nx.matmul(Q, K.T) / math.sqrt(d), mask)
    return nx.matmul(A, nx.matmul(E, layer.w_v))


def forward(weights: EncoderWeights, E: np.ndarray, mask: np.ndarray, *,
            pattern_set: PatternSet | None = None, dtype=np.float32,
            keep_cache: bool = False, trace: RunTrace | None = None) -> ChunkEmbeddings:
    """Encode all ``m`` mask rows against sentence embeddings ``E`` in one pass."""
    E = np.asarray(E)
    mask = np.asarray(mask)
    if E.ndim != 2 or mask.ndim != 2:
        raise ShapeMismatch("E and mask must be 2-D")
    if not np.all(np.isfinite(E)):
        raise NonFiniteInput("sentence embeddings contain non-finite values")
    if E.shape[1] != weights.d:
        raise ShapeMismatch(f"embedding dim {E.shape[1]} != encoder dim {weights.d}")
    if mask.shape[1] != E.shape[0]:
        raise ShapeMismatch(f"mask has {mask.shape[1]} columns for {E.shape[0]} sentences")

    E = E.astype(dtype, copy=False)
    mask = mask.astype(dtype, copy=False)
    m = mask.shape[0]
    caches = []
    state = np.zeros((m, weights.d), dtype=dtype)
    for layer in weights.layers:
        if layer.h_chk.dtype != dtype:
            layer = layer.astype(dtype)
        H = state + layer.h_chk
        state, cache = _layer_forward(layer, H, E, mask, keep_cache)
        if keep_cache:
            caches.append(cache)
    out = nx.l2_normalize_rows(state) if weights.normalize_output else state
    if trace is not None:
        trace.forward_passes += 1
        trace.chunk_rows += m
    return ChunkEmbeddings(matrix=out, pattern_set=pattern_set, caches=caches)
