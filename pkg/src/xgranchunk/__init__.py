"""Cross-granularity sentence chunking.

Documents are split into sentences once; a masked-attention encoder then
produces embeddings for many sentence combinations (every granularity, or
arbitrary index sets) in a single forward pass.
"""

from .encoder import EncoderWeights, forward, init_weights
from .patterns import build_explicit_patterns, build_sliding_patterns, pattern_to_mask
from .retrieval import ChunkIndex, ChunkRecord
from .sentencizer import count_tokens, sentencize, split_sentences

__version__ = "0.1.0"

__all__ = [
    "ChunkIndex", "ChunkRecord", "EncoderWeights", "build_explicit_patterns",
    "build_sliding_patterns", "count_tokens", "forward", "init_weights",
    "pattern_to_mask", "sentencize", "split_sentences",
]
