import numpy as np
import pytest

from ovtad.encoder import PyramidConfig
from ovtad.model import Model


def randomize(params: dict, rng, lo=-1.0, hi=1.0) -> None:
    """Overwrite every parameter with uniform draws (gradchecks want O(1) gradients)."""
    for p in params.values():
        p.data[...] = rng.uniform(lo, hi, size=p.shape)


def zero_weights(params: dict) -> None:
    for name, p in params.items():
        if not name.endswith((".gamma", ".kernel")):
            p.data[...] = 0.0


@pytest.fixture
def tiny_model():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_levels=2, num_heads=2, mlp_ratio=2)
    return Model.initialize(cfg, seed=0)
