"""Shared decoder heads: boundary regression and actionness per pyramid frame."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .encoder import init_layer_norm, init_linear, linear, _normal
from .tensor import Parameter, Tensor

# focal-loss style prior: initial actionness ~0.01 keeps early background loss small
ACTIONNESS_PRIOR = 0.01


@dataclass(frozen=True)
class PerFramePrediction:
    level: int
    index: int
    d_start: float
    d_end: float
    actionness: float


def init_head_params(d: int, rng: np.random.Generator) -> dict:
    params: dict[str, Parameter] = {}
    init_layer_norm(params, "head.ln", d)
    for i in range(2):
        params[f"head.conv{i}.kernel"] = _normal(rng, f"head.conv{i}.kernel", (3, d))
        init_linear(params, f"head.conv{i}.point", d, d, rng)
    init_linear(params, "head.reg", d, 2, rng)
    init_linear(params, "head.cls", d, 1, rng)
    params["head.cls.bias"].data[:] = -math.log((1 - ACTIONNESS_PRIOR) / ACTIONNESS_PRIOR)
    return params


def head_forward(z: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """Return (offsets T x 2 in level-stride units, actionness logits T)."""
    h = tc.layer_norm(z, params["head.ln.gamma"], params["head.ln.beta"])
    for i in range(2):
        h = tc.depthwise_conv1d(h, params[f"head.conv{i}.kernel"])
        h = tc.gelu(linear(h, params, f"head.conv{i}.point"))
    offsets = tc.softplus(linear(h, params, "head.reg"))
    logits = tc.reshape(linear(h, params, "head.cls"), (z.shape[0],))
    return offsets, logits


def decode_level(z: Tensor, params: dict, level: int) -> list[PerFramePrediction]:
    offsets, logits = head_forward(z, params)
    prob = tc._sigmoid(logits.data)
    return [PerFramePrediction(level, t, float(offsets.data[t, 0]), float(offsets.data[t, 1]),
                               float(prob[t])) for t in range(z.shape[0])]


def to_segment(p: PerFramePrediction, T: float, eps: float = 1e-6):
    """Base-frame interval of a prediction, or None when degenerate after clamping.

    ``p.level`` is the pyramid level whose stride is ``2**level``.
    """
    stride = 2 ** p.level
    start = min(max((p.index - p.d_start) * stride, 0.0), T)
    end = min(max((p.index + p.d_end) * stride, 0.0), T)
    if end - start <= eps:
        return None
    return start, end
