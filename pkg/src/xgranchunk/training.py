"""Distillation of the encoder against teacher chunk embeddings.

Loss is ``1 - mean_i cos(y_i, t_i)`` over all patterns of one document.
Gradients are derived by hand through every layer; computation runs in
float64 while the stored parameters stay float32.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .encoder import EncoderWeights, LayerCache, forward, init_weights
from .errors import NonFiniteGradient, ShapeMismatch, ZeroVector
from .patterns import DEFAULT_GRANULARITIES, PatternSet, build_sliding_patterns, pattern_to_mask

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 1
    base_lr: float = 1e-4
    warmup_fraction: float = 1 / 3
    granularities: tuple[int, ...] = DEFAULT_GRANULARITIES
    stride: int | None = None
    validation_interval: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.validation_interval < 1:
            raise ValueError("epochs must be >= 0; batch_size and validation_interval >= 1")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


@dataclass
class TrainingPair:
    """One document's sentence embeddings with its patterns and teacher targets."""

    E: np.ndarray
    patterns: PatternSet
    teacher: np.ndarray
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mask = pattern_to_mask(self.patterns, dtype=np.float64)
        if self.teacher.shape != (self.patterns.m, self.E.shape[1]):
            raise ShapeMismatch(
                f"teacher {self.teacher.shape} does not match {self.patterns.m} patterns x d={self.E.shape[1]}"
            )


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainResult:
    weights: EncoderWeights
    history: list[tuple[int, float, float]]  # (step, train_loss, val_loss or nan)
    config: TrainConfig

    @property
    def final_val_loss(self) -> float:
        vals = [v for _, _, v in self.history if not math.isnan(v)]
        return vals[-1] if vals else math.nan


# -- loss ---------------------------------------------------------------


def cosine_loss(pairs) -> float:
    """``1 - mean cos(e, v)`` over ``(e, v)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cosine_loss needs at least one pair")
    total = 0.0
    for e, v in pairs:
        e = np.asarray(e, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        ne, nv = np.linalg.norm(e), np.linalg.norm(v)
        if ne == 0 or nv == 0:
            raise ZeroVector("cosine undefined for a zero vector")
        total += float(e @ v) / (ne * nv)
    return 1.0 - total / len(pairs)


def cosine_loss_and_grad(Y: np.ndarray, T: np.ndarray) -> tuple[float, np.ndarray]:
    """Row-wise cosine loss between outputs ``Y`` and targets ``T`` and dL/dY."""
    ny = np.linalg.norm(Y, axis=1, keepdims=True)
    nt = np.linalg.norm(T, axis=1, keepdims=True)
    if np.any(ny == 0) or np.any(nt == 0):
        raise ZeroVector("cosine undefined for a zero row")
    cos = np.sum(Y * T, axis=1, keepdims=True) / (ny * nt)
    dcos = T / (ny * nt) - cos * Y / (ny * ny)
    return 1.0 - float(cos.mean()), -dcos / Y.shape[0]


# -- backward -----------------------------------------------------------


def _layer_norm_backward(dy, x, gain, eps=nx.LN_EPS):
    mu = x.mean(axis=1, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = (x - mu) / sigma
    dxhat = dy * gain
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / sigma
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def backprop(weights: EncoderWeights, caches: Sequence[LayerCache], E: np.ndarray,
             d_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Push ``dL/dY`` of the last layer back to every parameter and to ``E``.

    ``weights`` and ``caches`` must come from the same float64 forward pass.
    """
    grads: dict[str, np.ndarray] = {}
    dE = np.zeros_like(E)
    scale = 1.0 / math.sqrt(E.shape[1])
    dY = d_out
    for i in reversed(range(weights.num_layers)):
        layer, c = weights.layers[i], caches[i]
        p = f"layers.{i}."

        dR2, grads[p + "ln2_gain"], grads[p + "ln2_bias"] = _layer_norm_backward(dY, c.R2, layer.ln2_gain)
        grads[p + "b2"] = dR2.sum(axis=0)
        grads[p + "w2"] = c.G.T @ dR2
        dZ1 = (dR2 @ layer.w2.T) * nx.gelu_grad(c.Z1)
        grads[p + "b1"] = dZ1.sum(axis=0)
        grads[p + "w1"] = c.U.T @ dZ1
        dU = dR2 + dZ1 @ layer.w1.T

        dR1, grads[p + "ln1_gain"], grads[p + "ln1_bias"] = _layer_norm_backward(dU, c.R1, layer.ln1_gain)
        dA = dR1 @ c.V.T
        dV = c.A.T @ dR1
        # masked columns have A == 0 exactly, so their dS entries vanish too
        dS = c.A * (dA - np.sum(dA * c.A, axis=1, keepdims=True)) * scale
        dQ = dS @ c.K
        dK = dS.T @ c.Q

        grads[p + "w_q"] = c.H.T @ dQ
        grads[p + "w_k"] = E.T @ dK
        grads[p + "w_v"] = E.T @ dV
        dE += dK @ layer.w_k.T + dV @ layer.w_v.T

        dH = dR1 + dQ @ layer.w_q.T
        grads[p + "h_chk"] = dH.sum(axis=0)
        dY = dH
    return grads, dE


def backward(weights: EncoderWeights, E: np.ndarray, mask: np.ndarray,
             teacher: np.ndarray) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Loss, parameter gradients and dL/dE for one document."""
    w64 = weights.astype(np.float64)
    E64 = np.asarray(E, dtype=np.float64)
    out = forward(w64, E64, mask, dtype=np.float64, keep_cache=True)
    loss, dY = cosine_loss_and_grad(out.caches[-1].Y, np.asarray(teacher, dtype=np.float64))
    grads, dE = backprop(w64, out.caches, E64, dY)
    return loss, grads, dE


def document_loss(weights: EncoderWeights, pair: TrainingPair) -> float:
    out = forward(weights.astype(np.float64), pair.E, pair.mask, dtype=np.float64)
    return cosine_loss_and_grad(out.matrix, pair.teacher)[0]


# -- optimizer ----------------------------------------------------------


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None):
    """One AdamW update, in place. Decay is applied to the parameter before
    the moment step and is not folded into the gradient."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros(p.shape, np.float64))
        v = state.v.setdefault(name, np.zeros(p.shape, np.float64))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        new = p.astype(np.float64)
        new -= lr * state.weight_decay * new
        new -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p[...] = new
    return params, state


def warmup_steps(total_steps: int, warmup_fraction: float = 1 / 3) -> int:
    return math.ceil(total_steps * warmup_fraction)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg.warmup_fraction)
    if step <= warm:
        return cfg.base_lr * step / warm if warm else cfg.base_lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- loop ---------------------------------------------------------------

TeacherProvider = Callable[[int, np.ndarray, PatternSet], np.ndarray]


def mean_pool_teacher(E: np.ndarray, ps: PatternSet) -> np.ndarray:
    """Normalized mean of each pattern's sentence rows."""
    E = np.asarray(E, dtype=np.float64)
    rows = np.stack([E[list(p.sentence_indices)].mean(axis=0) for p in ps.patterns])
    return nx.l2_normalize_rows(rows)


def make_pairs(corpus: Sequence[np.ndarray], cfg: TrainConfig,
               teacher_provider: TeacherProvider | None = None, offset: int = 0) -> list[TrainingPair]:
    pairs = []
    for pos, E in enumerate(corpus, start=offset):
        E = np.asarray(E)
        ps = build_sliding_patterns(E.shape[0], cfg.granularities, cfg.stride)
        if teacher_provider is None:
            teacher = mean_pool_teacher(E, ps)
        else:
            teacher = np.asarray(teacher_provider(pos, E, ps), dtype=np.float64)
        pairs.append(TrainingPair(E=E, patterns=ps, teacher=teacher))
    return pairs


def evaluate(weights: EncoderWeights, pairs: Sequence[TrainingPair]) -> float:
    """Mean per-document cosine loss."""
    return float(np.mean([document_loss(weights, p) for p in pairs]))


def train(corpus: Sequence[np.ndarray], teacher_provider: TeacherProvider | None = None,
          cfg: TrainConfig | None = None, *, validation: Sequence[np.ndarray] = (),
          weights: EncoderWeights | None = None, num_layers: int = 2,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train on ``corpus`` (one sentence-embedding matrix per document).

    ``teacher_provider(pos, E, patterns)`` returns one target row per pattern;
    ``pos`` indexes the training documents first and the validation documents
    after them. Without a provider the mean-pool teacher is used.

    One optimizer step per ``batch_size`` documents; every sliding pattern of
    a document goes through one forward pass. Validation runs every
    ``validation_interval`` steps and once more at the end.
    """
    cfg = cfg or TrainConfig()
    if not corpus:
        raise ValueError("training corpus is empty")
    d = np.asarray(corpus[0]).shape[1]
    weights = init_weights(d, num_layers, seed=cfg.seed) if weights is None else weights.copy()
    weights.check()

    train_pairs = make_pairs(corpus, cfg, teacher_provider)
    val_pairs = make_pairs(validation, cfg, teacher_provider, offset=len(corpus)) if len(validation) else []
    steps_per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history: list[tuple[int, float, float]] = []
    if total == 0:
        return TrainResult(weights, history, cfg)

    params = weights.named_parameters()
    state = OptimizerState(lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                           eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_pairs))
        for b in range(steps_per_epoch):
            batch = [train_pairs[j] for j in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            acc = {k: np.zeros(v.shape, np.float64) for k, v in params.items()}
            loss = 0.0
            for pair in batch:
                l, g, _ = backward(weights, pair.E, pair.mask, pair.teacher)
                loss += l / len(batch)
                for k in acc:
                    acc[k] += g[k] / len(batch)
            step += 1
            adamw_step(params, acc, state, lr=lr_at(step, total, cfg))
            val = math.nan
            if val_pairs and (step % cfg.validation_interval == 0 or step == total):
                val = evaluate(weights, val_pairs)
                log.info("step %d/%d train %.5f val %.5f", step, total, loss, val)
            history.append((step, loss, val))
            if progress is not None:
                progress(step, loss)
    return TrainResult(weights, history, cfg)
