"""Projection layer and multi-scale transformer pyramid."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .data import ConfigurationError, FeatureSequence
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass
class PyramidConfig:
    input_dim: int = 16
    model_dim: int = 32
    num_levels: int = 6
    num_heads: int = 4
    mlp_ratio: int = 4
    projection_depth: int = 2
    dropout_rate: float = 0.0
    layer_type: str = "transformer"  # or "conv" for the convolutional ablation
    positional_encoding: bool = False
    max_len: int = 4096

    def __post_init__(self):
        if self.num_levels < 1:
            raise ConfigurationError("num_levels must be >= 1")
        if self.model_dim % self.num_heads:
            raise ConfigurationError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.projection_depth < 1:
            raise ConfigurationError("projection_depth must be >= 1")
        if self.layer_type not in ("transformer", "conv"):
            raise ConfigurationError(f"unknown layer_type {self.layer_type!r}")


@dataclass
class Pyramid:
    z0: Tensor
    levels: list[Tensor] = field(default_factory=list)

    @property
    def lengths(self) -> list[int]:
        return [z.shape[0] for z in self.levels]


def level_lengths(T: int, num_levels: int) -> list[int]:
    out, n = [], T
    for _ in range(num_levels):
        n = max(1, math.ceil(n / 2))
        out.append(n)
    return out


def scoped(params: dict, prefix: str) -> dict:
    """View of ``params`` under ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _normal(rng, name, shape):
    return Parameter(name, rng.normal(0.0, INIT_STD, size=shape))


def _zeros(name, shape):
    return Parameter(name, np.zeros(shape))


def _ones(name, shape):
    return Parameter(name, np.ones(shape))


def init_linear(params: dict, name: str, d_in: int, d_out: int, rng) -> None:
    params[f"{name}.weight"] = _normal(rng, f"{name}.weight", (d_in, d_out))
    params[f"{name}.bias"] = _zeros(f"{name}.bias", (d_out,))


def init_layer_norm(params: dict, name: str, d: int) -> None:
    params[f"{name}.gamma"] = _ones(f"{name}.gamma", (d,))
    params[f"{name}.beta"] = _zeros(f"{name}.beta", (d,))


def smoothing_kernel(name: str, d: int) -> Parameter:
    # binomial [1,2,1]/4 keeps the residual stream's scale across levels
    k = np.tile(np.array([[0.25], [0.5], [0.25]]), (1, d))
    return Parameter(name, k)


def init_encoder_params(cfg: PyramidConfig, rng: np.random.Generator) -> dict:
    params: dict[str, Parameter] = {}
    d = cfg.model_dim
    dims = [cfg.input_dim] + [d] * cfg.projection_depth
    for i in range(cfg.projection_depth):
        init_linear(params, f"proj.{i}", dims[i], dims[i + 1], rng)
    if cfg.positional_encoding:
        params["proj.pos"] = _normal(rng, "proj.pos", (cfg.max_len, d))
    hidden = cfg.mlp_ratio * d
    for l in range(cfg.num_levels):
        pre = f"levels.{l}"
        init_layer_norm(params, f"{pre}.ln1", d)
        if cfg.layer_type == "transformer":
            for w in ("q", "k", "v", "o"):
                init_linear(params, f"{pre}.attn.{w}", d, d, rng)
        else:
            params[f"{pre}.mix.kernel"] = _normal(rng, f"{pre}.mix.kernel", (3, d))
            init_linear(params, f"{pre}.mix.point", d, d, rng)
        init_layer_norm(params, f"{pre}.ln2", d)
        init_linear(params, f"{pre}.mlp.fc1", d, hidden, rng)
        init_linear(params, f"{pre}.mlp.fc2", hidden, d, rng)
        params[f"{pre}.down.kernel"] = smoothing_kernel(f"{pre}.down.kernel", d)
    return params


def linear(x: Tensor, p: dict, name: str) -> Tensor:
    return tc.add(tc.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return tc.mul(x, Tensor(keep / (1.0 - rate)))


def project(x, params: dict, cfg: PyramidConfig | None = None) -> Tensor:
    """Per-frame MLP from input features to the model dimension (Z^0)."""
    feats = x.features if isinstance(x, FeatureSequence) else x
    z = feats if isinstance(feats, Tensor) else Tensor(feats)
    depth = cfg.projection_depth if cfg else len([k for k in params if
                                                  k.startswith("proj.") and k.endswith(".weight")])
    w0 = params["proj.0.weight"]
    if z.shape[1] != w0.shape[0]:
        raise ConfigurationError(
            f"feature dim {z.shape[1]} does not match projection input {w0.shape[0]}")
    for i in range(depth):
        if i:
            z = tc.gelu(z)
        z = linear(z, params, f"proj.{i}")
    if "proj.pos" in params:
        T = z.shape[0]
        if T > params["proj.pos"].shape[0]:
            raise ConfigurationError(f"sequence length {T} exceeds positional table")
        z = tc.add(z, tc.index(params["proj.pos"], slice(0, T)))
    return z


def attention(x: Tensor, p: dict, num_heads: int, return_weights: bool = False):
    """Multi-head full self-attention over the rows of ``x``."""
    d = x.shape[1]
    dh = d // num_heads
    q = linear(x, p, "attn.q")
    k = linear(x, p, "attn.k")
    v = linear(x, p, "attn.v")
    heads, weights = [], []
    for h in range(num_heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        scores = tc.scale(tc.matmul(q[cols], tc.transpose(k[cols])), 1.0 / math.sqrt(dh))
        w = tc.softmax(scores, axis=-1)
        weights.append(w)
        heads.append(tc.matmul(w, v[cols]))
    out = linear(tc.concat(heads, axis=1), p, "attn.o")
    return (out, weights) if return_weights else out


def encoder_layer(z: Tensor, p: dict, cfg: PyramidConfig, rng=None,
                  return_attention: bool = False):
    """Pre-norm block: z + Mix(LN(z)), then + MLP(LN(.)).

    ``p`` holds this layer's parameters with the ``levels.<l>.`` prefix
    stripped. Mix is multi-head attention, or a depthwise conv + pointwise
    projection when ``cfg.layer_type == "conv"``.
    """
    h = tc.layer_norm(z, p["ln1.gamma"], p["ln1.beta"])
    weights = None
    if cfg.layer_type == "transformer":
        mixed, weights = attention(h, p, cfg.num_heads, return_weights=True)
    else:
        mixed = linear(tc.gelu(tc.depthwise_conv1d(h, p["mix.kernel"])), p, "mix.point")
    z = tc.add(z, _dropout(mixed, cfg.dropout_rate, rng))
    h = tc.layer_norm(z, p["ln2.gamma"], p["ln2.beta"])
    h = linear(tc.gelu(linear(h, p, "mlp.fc1")), p, "mlp.fc2")
    z = tc.add(z, _dropout(h, cfg.dropout_rate, rng))
    return (z, weights) if return_attention else z


def downsample(z: Tensor, p: dict) -> Tensor:
    """Strided depthwise conv, k=3, stride 2, padding 1: T -> ceil(T/2)."""
    return tc.depthwise_conv1d(z, p["down.kernel"], stride=2, padding=1)


def build_pyramid(x, params: dict, cfg: PyramidConfig, rng=None) -> Pyramid:
    feats = x.features if isinstance(x, FeatureSequence) else x
    T = feats.shape[0]
    if T < 2 ** cfg.num_levels:
        log.warning("sequence length %d < 2^%d; coarse levels clamp at one frame",
                    T, cfg.num_levels)
    z = project(x, params, cfg)
    pyr = Pyramid(z0=z)
    for l in range(cfg.num_levels):
        p = scoped(params, f"levels.{l}.")
        z = downsample(encoder_layer(z, p, cfg, rng), p)
        pyr.levels.append(z)
    return pyr
