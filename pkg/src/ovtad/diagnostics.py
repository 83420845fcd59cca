"""Finite-difference checks of the two composite training paths.

Used by the ``gradcheck`` subcommand and the acceptance suite. Parameters are
redrawn uniformly in [-1, 1] so that gradients are O(1) and the relative error
is meaningful.
"""
from __future__ import annotations

import numpy as np

from .align import AlignmentConfig, pool_segments, vta_loss
from .data import Segment, TextEmbeddingSet
from .encoder import PyramidConfig
from .losses import LossWeights, assign_target_arrays, mva_loss
from .model import Model
from .tensor import Tensor, gradcheck

TINY = PyramidConfig(input_dim=3, model_dim=4, num_levels=2, num_heads=2, mlp_ratio=2)


def _randomized_model(seed: int, cfg: PyramidConfig = TINY) -> tuple[Model, np.random.Generator]:
    rng = np.random.default_rng(seed)
    model = Model.initialize(cfg, seed)
    for p in model.parameters():
        p.data[...] = rng.uniform(-1.0, 1.0, size=p.shape)
    return model, rng


def detection_path_error(seed: int, coords: int = 4) -> float:
    """project -> pyramid -> heads -> mva_loss, w.r.t. input features and every parameter."""
    model, rng = _randomized_model(seed)
    T = 8
    x = Tensor(rng.uniform(-1, 1, size=(T, TINY.input_dim)), requires_grad=True)
    gts = [Segment("g", 0.0, 3.0, "a"), Segment("g", 2.0, 8.0, "a")]
    targets = assign_target_arrays([4, 2], gts, T)
    keys = list(model.params)

    def f(xx, *ps):
        m = Model(TINY, dict(zip(keys, ps)))
        out = m.forward(xx)
        return mva_loss(out.offsets, out.logits, targets, LossWeights())

    return gradcheck(f, [x] + [model.params[k] for k in keys], coords=coords, seed=seed)


def alignment_path_error(seed: int) -> float:
    """pool -> similarity -> vta_loss, w.r.t. the projected features and every level."""
    rng = np.random.default_rng(seed)
    D = 4
    z0 = Tensor(rng.uniform(-1, 1, size=(16, D)), requires_grad=True)
    levels = [Tensor(rng.uniform(-1, 1, size=(n, D)), requires_grad=True) for n in (8, 4)]
    text = TextEmbeddingSet(["a", "b", "c"], rng.normal(size=(3, D)), "diagnostic")
    segs = [(1.0, 5.0), (6.0, 15.0), (0.0, 16.0)]
    targets = [2, 0, 1]
    cfg = AlignmentConfig(temperature=0.5, lambda2=0.7)

    def f(a, *lv):
        pooled = pool_segments(a, list(lv), segs, targets)
        return vta_loss(pooled.z0, pooled.levels, text, targets, cfg)

    return gradcheck(f, [z0] + levels)


def run_all(seeds: int = 20) -> dict[str, float]:
    """Worst relative error per composite path over ``seeds`` seeds."""
    return {
        "detection": max(detection_path_error(s) for s in range(seeds)),
        "alignment": max(alignment_path_error(s) for s in range(seeds)),
    }


__all__ = ["detection_path_error", "alignment_path_error", "run_all", "TINY"]
