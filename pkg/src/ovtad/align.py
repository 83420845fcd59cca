"""Length-aware pooling and contrastive video-text alignment."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .data import ConfigurationError, TextEmbeddingSet
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AlignmentConfig:
    temperature: float = 0.07
    lambda2: float = 1.0
    normalize_before_dot: bool = False
    strict_negative_denominator: bool = False
    # fusion ablations: which feature sources are aligned with text
    use_projection_feature: bool = True
    use_multiscale_feature: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not (self.use_projection_feature or self.use_multiscale_feature):
            raise ValueError("at least one feature source must be aligned")


@dataclass
class PooledActionFeatures:
    z0: Tensor                 # N x D'
    levels: list[Tensor]       # L tensors of N x D'
    class_index: np.ndarray    # N


def pool_rows(n_rows: int, segment: tuple[float, float], level: int) -> tuple[int, int]:
    """Half-open row range covered by ``segment`` at a level of stride 2**level."""
    if n_rows < 1:
        raise ValueError("cannot pool over an empty level")
    start, end = segment
    if not 0 <= start < end:
        raise ValueError(f"invalid segment {segment}")
    stride = 2 ** level
    lo = min(int(math.floor(start / stride)), n_rows - 1)
    hi = min(max(lo + 1, int(math.ceil(end / stride))), n_rows)
    return lo, hi


def length_aware_pool(z: Tensor, segment: tuple[float, float], level: int) -> Tensor:
    lo, hi = pool_rows(z.shape[0], segment, level)
    return tc.mean(tc.index(z, slice(lo, hi)), axis=0)


def pooling_matrix(n_rows: int, segments, level: int) -> np.ndarray:
    """Row-averaging weights so that ``W @ z`` pools every segment at once."""
    W = np.zeros((len(segments), n_rows))
    for i, seg in enumerate(segments):
        lo, hi = pool_rows(n_rows, seg, level)
        W[i, lo:hi] = 1.0 / (hi - lo)
    return W


def pool_segments(z0: Tensor, levels: list[Tensor], segments, class_index) -> PooledActionFeatures:
    segs = [(float(s), float(e)) for s, e in segments]
    p0 = tc.matmul(Tensor(pooling_matrix(z0.shape[0], segs, 0)), z0)
    pl = [tc.matmul(Tensor(pooling_matrix(z.shape[0], segs, l + 1)), z)
          for l, z in enumerate(levels)]
    return PooledActionFeatures(p0, pl, np.asarray(class_index, dtype=int))


def _l2_normalize_rows(x: Tensor) -> Tensor:
    norms = tc.power(tc.add(tc.sum(tc.square(x), axis=1), 1e-12), 0.5)
    return tc.transpose(tc.div(tc.transpose(x), norms))


def similarity(pooled: Tensor, text, normalize: bool = False) -> Tensor:
    """Dot-product logits between pooled video rows and text embeddings (N x M)."""
    A = text.embeddings if isinstance(text, TextEmbeddingSet) else np.asarray(
        text.data if isinstance(text, Tensor) else text)
    if pooled.shape[-1] != A.shape[1]:
        raise ConfigurationError(
            f"video feature dim {pooled.shape[-1]} does not match text dim {A.shape[1]}")
    if normalize:
        pooled = _l2_normalize_rows(pooled)
        A = A / np.linalg.norm(A, axis=1, keepdims=True)
    return tc.matmul(pooled, Tensor(A.T))


def contrastive_loss(logits: Tensor, targets, temperature: float,
                     strict_negative_denominator: bool = False) -> Tensor:
    """Mean over rows of -log softmax(logits / temperature)[target]."""
    targets = np.asarray(targets, dtype=int)
    N, M = logits.shape
    if N == 0:
        log.warning("contrastive loss over zero actions; returning 0")
        return Tensor(0.0)
    if np.any(targets >= M) or np.any(targets < 0):
        raise ValueError(f"target index out of range for {M} classes")
    rows = np.arange(N)
    x = tc.scale(logits, 1.0 / temperature)
    if not strict_negative_denominator:
        return tc.neg(tc.mean(tc.index(tc.log_softmax(x, axis=1), (rows, targets))))
    if M < 2:
        raise ValueError("strict negative denominator needs at least two classes")
    negcols = np.array([[j for j in range(M) if j != t] for t in targets])
    neg = tc.index(x, (rows[:, None], negcols))
    shift = neg.data.max(axis=1, keepdims=True) * np.ones_like(neg.data)
    lse = tc.add(tc.log(tc.sum(tc.exp(tc.sub(neg, shift)), axis=1)), shift[:, 0])
    return tc.mean(tc.sub(lse, tc.index(x, (rows, targets))))


def vta_loss(pooled0: Tensor, pooled_levels: list[Tensor], text, targets,
             cfg: AlignmentConfig) -> Tensor:
    """Projection-feature term plus lambda2 times the per-level terms."""
    def term(p):
        return contrastive_loss(similarity(p, text, cfg.normalize_before_dot), targets,
                                cfg.temperature, cfg.strict_negative_denominator)

    parts = []
    if cfg.use_projection_feature:
        parts.append(term(pooled0))
    if cfg.use_multiscale_feature and pooled_levels:
        multi = term(pooled_levels[0])
        for p in pooled_levels[1:]:
            multi = tc.add(multi, term(p))
        parts.append(tc.scale(multi, cfg.lambda2))
    out = parts[0]
    for p in parts[1:]:
        out = tc.add(out, p)
    return out
