"""tIoU, average precision, mAP and open-vocabulary class splits."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Segment

log = logging.getLogger(__name__)


def tiou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / ((a.end - a.start) + (b.end - b.start) - inter)


def rank_predictions(preds: list[Segment]) -> list[Segment]:
    return sorted(preds, key=lambda s: (-s.score, s.video_id, s.start, s.end))


def match_predictions(preds: list[Segment], gts: list[Segment], thresh: float) -> np.ndarray:
    """Greedy matching in rank order; returns a true-positive flag per ranked prediction."""
    by_video: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(i)
    used = [False] * len(gts)
    tp = np.zeros(len(preds), dtype=bool)
    for k, p in enumerate(preds):
        best, best_iou = -1, -1.0
        for i in by_video.get(p.video_id, ()):
            if used[i]:
                continue
            ov = tiou(p, gts[i])
            if ov >= thresh and ov > best_iou:
                best, best_iou = i, ov
        if best >= 0:
            used[best] = True
            tp[k] = True
    return tp


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ranked true-positive flags."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def average_precision(preds: list[Segment], gts: list[Segment], thresh: float) -> float:
    """Single-class AP at one tIoU threshold."""
    if not gts:
        log.warning("average_precision with no ground truth; defined as 0")
        return 0.0
    ranked = rank_predictions(preds)
    return ap_from_tp(match_predictions(ranked, gts, thresh), len(gts))


def mean_ap(preds: list[Segment], gts: list[Segment], tiou_thresholds,
            classes: list[str] | None = None) -> dict:
    """Per-class AP, per-threshold mAP and their average.

    Classes without ground truth are excluded from the mean.
    """
    thresholds = [float(t) for t in tiou_thresholds]
    names = classes if classes is not None else sorted({g.label for g in gts})
    gt_by = {c: [g for g in gts if g.label == c] for c in names}
    pred_by = {c: [p for p in preds if p.label == c] for c in names}
    per_class = {}
    for c in names:
        if not gt_by[c]:
            continue
        ranked = rank_predictions(pred_by[c])
        per_class[c] = [ap_from_tp(match_predictions(ranked, gt_by[c], t), len(gt_by[c]))
                        for t in thresholds]
    if per_class:
        maps = [float(np.mean([v[i] for v in per_class.values()]))
                for i in range(len(thresholds))]
    else:
        maps = [0.0] * len(thresholds)
    return {
        "tiou_thresholds": thresholds,
        "per_class_ap": per_class,
        "map": maps,
        "average_map": float(np.mean(maps)) if maps else 0.0,
    }


@dataclass
class SplitSpec:
    seed: int
    train_fraction: float
    split_index: int
    train_classes: list[str]
    test_classes: list[str]

    def __post_init__(self):
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("train and test classes overlap")


def make_splits(classes: list[str], fraction: float, n_splits: int, seed: int) -> list[SplitSpec]:
    """Seeded random class partitions with round(fraction * |classes|) train classes."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate class names")
    n_train = int(math.floor(fraction * len(classes) + 0.5))
    n_train = min(max(n_train, 1), len(classes) - 1)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_splits):
        chosen = set(rng.permutation(len(classes))[:n_train].tolist())
        train = [c for i, c in enumerate(classes) if i in chosen]
        test = [c for i, c in enumerate(classes) if i not in chosen]
        out.append(SplitSpec(seed, fraction, k, train, test))
    return out


def split_videos(dataset: Dataset, split: SplitSpec) -> tuple[list[str], list[str]]:
    """(train video ids, test video ids): any test-class action sends a video to test."""
    test_set = set(split.test_classes)
    train_ids, test_ids = [], []
    for v in dataset.videos:
        labels = {s.label for s in dataset.annotations.get(v.video_id, [])}
        (test_ids if labels & test_set else train_ids).append(v.video_id)
    return train_ids, test_ids
