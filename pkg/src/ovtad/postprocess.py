"""Inference decoding, Soft-NMS and open-vocabulary labelling of candidates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .align import AlignmentConfig, pooling_matrix
from .data import UNASSIGNED, FeatureSequence, Segment, TextEmbeddingSet
from .encoder import Pyramid
from .heads import PerFramePrediction, to_segment
from .tensor import _sigmoid

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    tiou_thresholds: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])
    softnms_sigma: float = 0.5
    softnms_score_floor: float = 0.001
    pre_nms_topk: int = 200
    actionness_floor: float = 0.01
    max_detections_per_video: int = 100

    def __post_init__(self):
        if any(not 0 < t <= 1 for t in self.tiou_thresholds):
            raise ValueError("tIoU thresholds must lie in (0, 1]")
        if self.softnms_sigma <= 0:
            raise ValueError("softnms_sigma must be > 0")


def interval_iou(a0: float, a1: float, b0: float, b1: float) -> float:
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    return inter / ((a1 - a0) + (b1 - b0) - inter)


def decode_candidates(model, video: FeatureSequence, cfg: EvalConfig, output=None,
                      stats: dict | None = None) -> list[Segment]:
    """Unlabelled candidates from every pyramid frame above the actionness floor."""
    out = output if output is not None else model.forward(video)
    T = float(video.length)
    cands, degenerate = [], 0
    for li, (off, logit) in enumerate(zip(out.offsets, out.logits)):
        level = li + 1
        prob = _sigmoid(logit.data)
        keep = np.flatnonzero(prob > cfg.actionness_floor)
        # stable order: score desc, then frame index
        keep = keep[np.argsort(-prob[keep], kind="stable")][:cfg.pre_nms_topk]
        for t in keep:
            p = PerFramePrediction(level, int(t), float(off.data[t, 0]), float(off.data[t, 1]),
                                   float(prob[t]))
            seg = to_segment(p, T)
            if seg is None:
                degenerate += 1
                continue
            cands.append(Segment(video.video_id, seg[0], seg[1], UNASSIGNED, p.actionness))
    if stats is not None:
        stats["degenerate"] = stats.get("degenerate", 0) + degenerate
    return cands


def _order_key(s: Segment):
    return (-s.score, s.start, s.end)


def soft_nms(cands: list[Segment], sigma: float = 0.5, floor: float = 0.001) -> list[Segment]:
    """Gaussian Soft-NMS; returns rescored survivors in selection order."""
    pool = [Segment(c.video_id, c.start, c.end, c.label, c.score) for c in cands]
    kept = []
    while pool:
        best = min(range(len(pool)), key=lambda i: _order_key(pool[i]))
        top = pool.pop(best)
        kept.append(top)
        survivors = []
        for c in pool:
            iou = interval_iou(top.start, top.end, c.start, c.end)
            c.score = c.score * math.exp(-(iou * iou) / sigma)
            if c.score >= floor:
                survivors.append(c)
        pool = survivors
    return kept


def source_features(pyramid: Pyramid, cfg: AlignmentConfig):
    """(level index, feature matrix) pairs used for text alignment."""
    out = []
    if cfg.use_projection_feature:
        out.append((0, pyramid.z0.data))
    if cfg.use_multiscale_feature:
        out.extend((l + 1, z.data) for l, z in enumerate(pyramid.levels))
    return out


def classify_open_vocab(cands: list[Segment], pyramid: Pyramid, text: TextEmbeddingSet,
                        cfg: AlignmentConfig) -> list[Segment]:
    """Label candidates by text similarity averaged over the aligned feature sources."""
    if not cands:
        return []
    A = text.embeddings
    if cfg.normalize_before_dot:
        A = A / np.linalg.norm(A, axis=1, keepdims=True)
    segs = [(c.start, c.end) for c in cands]
    logits = np.zeros((len(cands), len(text.class_names)))
    sources = source_features(pyramid, cfg)
    for level, z in sources:
        pooled = pooling_matrix(z.shape[0], segs, level) @ z
        if cfg.normalize_before_dot:
            pooled = pooled / np.maximum(np.linalg.norm(pooled, axis=1, keepdims=True), 1e-12)
        logits += pooled @ A.T
    logits /= len(sources)
    x = logits / cfg.temperature
    x = x - x.max(axis=1, keepdims=True)
    prob = np.exp(x)
    prob /= prob.sum(axis=1, keepdims=True)
    best = prob.argmax(axis=1)
    return [Segment(c.video_id, c.start, c.end, text.class_names[j],
                    min(1.0, c.score * float(prob[i, j])))
            for i, (c, j) in enumerate(zip(cands, best))]
