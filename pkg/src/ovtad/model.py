"""Detector parameters plus the full forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import PyramidConfig, Pyramid, build_pyramid, init_encoder_params
from .heads import head_forward, init_head_params
from .tensor import Parameter, Tensor


@dataclass
class ForwardOutput:
    pyramid: Pyramid
    offsets: list[Tensor]   # per level, T_l x 2
    logits: list[Tensor]    # per level, T_l


class Model:
    def __init__(self, cfg: PyramidConfig, params: dict[str, Parameter]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: PyramidConfig, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        params = init_encoder_params(cfg, rng)
        params.update(init_head_params(cfg.model_dim, rng))
        return cls(cfg, params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x, rng=None) -> ForwardOutput:
        pyr = build_pyramid(x, self.params, self.cfg, rng)
        offsets, logits = [], []
        for z in pyr.levels:
            o, g = head_forward(z, self.params)
            offsets.append(o)
            logits.append(g)
        return ForwardOutput(pyr, offsets, logits)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}
