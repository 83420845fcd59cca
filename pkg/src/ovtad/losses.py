"""Frame-to-ground-truth assignment and the detection losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .data import Segment
from .tensor import Tensor

FOCAL_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda3: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for k in ("lambda1", "lambda3", "focal_alpha", "focal_gamma"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass(frozen=True)
class FrameTarget:
    level: int
    index: int
    is_positive: bool
    gt_index: int | None = None
    target_d_start: float | None = None
    target_d_end: float | None = None


@dataclass
class LevelTargets:
    """Vectorised targets for one pyramid level (offsets in level-stride units)."""
    level: int
    positive: np.ndarray   # bool, T_l
    gt_index: np.ndarray   # int, -1 for negatives
    d_start: np.ndarray    # float, nan for negatives
    d_end: np.ndarray


def regression_ranges(num_levels: int) -> list[float]:
    """Bounds r_0..r_L on max(center-start, end-center); L=6 gives [0,4,...,64,inf]."""
    return [0.0] + [float(2 ** (l + 1)) for l in range(1, num_levels)] + [math.inf]


def _validate_gt(gt: list[Segment], T: float | None) -> None:
    for g in gt:
        if not g.end > g.start or g.start < 0 or (T is not None and g.end > T):
            raise ValueError(f"{g.video_id}: malformed ground-truth segment "
                             f"({g.start}, {g.end}) for length {T}")


def assign_target_arrays(pyramid_lengths: list[int], gt: list[Segment],
                         T: float | None = None) -> list[LevelTargets]:
    _validate_gt(gt, T)
    bounds = regression_ranges(len(pyramid_lengths))
    starts = np.array([g.start for g in gt], dtype=np.float64)
    ends = np.array([g.end for g in gt], dtype=np.float64)
    lengths = ends - starts
    out = []
    for li, n in enumerate(pyramid_lengths):
        level = li + 1
        stride = 2.0 ** level
        c = np.arange(n, dtype=np.float64)[:, None] * stride
        if len(gt):
            left, right = c - starts, ends - c
            reach = np.maximum(left, right)
            ok = (left >= 0) & (right >= 0) & (reach > bounds[li]) & (reach <= bounds[li + 1])
            # shortest matching gt wins; argmin picks the lowest index on equal lengths
            cost = np.where(ok, lengths, np.inf)
            best = np.argmin(cost, axis=1)
            pos = np.isfinite(cost[np.arange(n), best])
        else:
            pos = np.zeros(n, dtype=bool)
            best = np.zeros(n, dtype=int)
        gidx = np.where(pos, best, -1)
        ds = np.full(n, np.nan)
        de = np.full(n, np.nan)
        if pos.any():
            cc = c[pos, 0]
            ds[pos] = (cc - starts[gidx[pos]]) / stride
            de[pos] = (ends[gidx[pos]] - cc) / stride
        out.append(LevelTargets(level, pos, gidx, ds, de))
    return out


def assign_targets(pyramid_lengths: list[int], gt: list[Segment],
                   T: float | None = None) -> list[FrameTarget]:
    """Label every pyramid frame positive/negative with FPN-style range assignment."""
    frames = []
    for lt in assign_target_arrays(pyramid_lengths, gt, T):
        for t in range(len(lt.positive)):
            if lt.positive[t]:
                frames.append(FrameTarget(lt.level, t, True, int(lt.gt_index[t]),
                                          float(lt.d_start[t]), float(lt.d_end[t])))
            else:
                frames.append(FrameTarget(lt.level, t, False))
    return frames


def diou_loss(pred, gt) -> Tensor:
    """1 - IoU + (center distance / enclosing span)^2 for 1-D intervals.

    ``pred`` and ``gt`` are (start, end) pairs of scalars, arrays or tensors;
    the result is elementwise.
    """
    ps, pe = (tc.as_tensor(v) for v in pred)
    gs, ge = (tc.as_tensor(v) for v in gt)
    if np.any(pe.data <= ps.data) or np.any(ge.data <= gs.data):
        raise ValueError("diou_loss: intervals must have end > start")
    inter = tc.relu(tc.sub(tc.minimum(pe, ge), tc.maximum(ps, gs)))
    union = tc.sub(tc.add(tc.sub(pe, ps), tc.sub(ge, gs)), inter)
    iou = tc.div(inter, union)
    enclose = tc.sub(tc.maximum(pe, ge), tc.minimum(ps, gs))
    center_gap = tc.scale(tc.sub(tc.add(ps, pe), tc.add(gs, ge)), 0.5)
    penalty = tc.div(tc.square(center_gap), tc.square(enclose))
    return tc.add(tc.sub(1.0, iou), penalty)


def focal_loss(p, is_positive, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise -alpha_t (1 - p_t)^gamma log(p_t) on actionness probabilities."""
    p = tc.as_tensor(p)
    pos = np.broadcast_to(np.asarray(is_positive, dtype=bool), p.shape)
    sign = np.where(pos, 1.0, -1.0)
    offset = np.where(pos, 0.0, 1.0)
    pt = tc.clamp(tc.add(tc.mul(p, sign), offset), FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    alpha_t = np.where(pos, alpha, 1.0 - alpha)
    modulating = tc.power(tc.sub(1.0, pt), gamma)
    return tc.mul(tc.neg(tc.mul(modulating, tc.log(pt))), alpha_t)


def mva_loss_parts(offsets: list[Tensor], logits: list[Tensor],
                   targets: list[LevelTargets], weights: LossWeights) -> tuple[Tensor, Tensor]:
    """(boundary-regression term, actionness term) before weighting."""
    all_logits = tc.concat(logits, axis=0) if len(logits) > 1 else logits[0]
    positive = np.concatenate([t.positive for t in targets])
    npos = int(positive.sum())
    prob = tc.sigmoid(all_logits)
    bc = tc.scale(tc.sum(focal_loss(prob, positive, weights.focal_alpha, weights.focal_gamma)),
                  1.0 / max(1, npos))
    if npos == 0:
        return Tensor(0.0), bc
    all_off = tc.concat(offsets, axis=0) if len(offsets) > 1 else offsets[0]
    rows = np.flatnonzero(positive)
    ds = np.concatenate([t.d_start for t in targets])[rows]
    de = np.concatenate([t.d_end for t in targets])[rows]
    pred = tc.index(all_off, rows)
    # intervals relative to the frame center, so the shared center cancels
    br = tc.mean(diou_loss((tc.neg(pred[:, 0]), pred[:, 1]), (-ds, de)))
    return br, bc


def mva_loss(offsets: list[Tensor], logits: list[Tensor], targets: list[LevelTargets],
             weights: LossWeights) -> Tensor:
    br, bc = mva_loss_parts(offsets, logits, targets, weights)
    return tc.add(br, tc.scale(bc, weights.lambda1))


def total_loss(mva, vta, weights: LossWeights) -> Tensor:
    return tc.add(mva, tc.scale(vta, weights.lambda3))
