import logging
import math

import numpy as np
import pytest

from ovtad import tensor as tc
from ovtad.data import ConfigurationError, FeatureSequence
from ovtad.encoder import (
    PyramidConfig, attention, build_pyramid, downsample, encoder_layer, init_encoder_params,
    level_lengths, project, scoped,
)
from ovtad.tensor import Parameter, Tensor, gradcheck

from conftest import randomize


def make(cfg, seed=0):
    return init_encoder_params(cfg, np.random.default_rng(seed))


def seq(T, D, seed=0):
    return FeatureSequence("v", np.random.default_rng(seed).normal(size=(T, D)))


def test_identity_projection():
    cfg = PyramidConfig(input_dim=6, model_dim=6, num_heads=2, projection_depth=1)
    params = make(cfg)
    params["proj.0.weight"].data[...] = np.eye(6)
    params["proj.0.bias"].data[...] = 0.0
    x = seq(10, 6)
    np.testing.assert_array_equal(project(x, params, cfg).data, x.features)


def test_projection_shape():
    cfg = PyramidConfig(input_dim=16, model_dim=32)
    assert project(seq(128, 16), make(cfg), cfg).shape == (128, 32)


def test_projection_dim_mismatch():
    cfg = PyramidConfig(input_dim=16, model_dim=32)
    with pytest.raises(ConfigurationError):
        project(seq(8, 5), make(cfg), cfg)


def test_projection_is_per_frame():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2)
    params = make(cfg)
    x = seq(9, 4)
    perm = np.random.default_rng(3).permutation(9)
    z = project(x, params, cfg).data
    zp = project(FeatureSequence("v", x.features[perm]), params, cfg).data
    np.testing.assert_array_equal(zp[np.argsort(perm)], z)


@pytest.mark.parametrize("seed", range(20))
def test_projection_gradcheck(seed):
    cfg = PyramidConfig(input_dim=3, model_dim=4, num_heads=2)
    rng = np.random.default_rng(seed)
    params = make(cfg, seed)
    randomize(params, rng)
    x = Tensor(rng.uniform(-1, 1, size=(5, 3)), requires_grad=True)
    proj = Tensor(rng.normal(size=(5, 4)))
    keys = list(params)
    err = gradcheck(lambda xx, *ps: tc.sum(tc.mul(project(xx, dict(zip(keys, ps)), cfg), proj)),
                    [x] + [params[k] for k in keys])
    assert err < 1e-4


def test_zero_weights_layer_is_identity():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2)
    params = make(cfg)
    p = scoped(params, "levels.0.")
    for name, t in p.items():
        if "attn" in name or "mlp" in name:
            t.data[...] = 0.0
    z = Tensor(np.random.default_rng(0).normal(size=(7, 8)))
    np.testing.assert_array_equal(encoder_layer(z, p, cfg).data, z.data)


def test_single_frame_attention_is_one():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2)
    p = scoped(make(cfg), "levels.0.")
    _, weights = encoder_layer(Tensor(np.ones((1, 8))), p, cfg, return_attention=True)
    for w in weights:
        np.testing.assert_array_equal(w.data, [[1.0]])


def test_attention_rows_sum_to_one():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=4)
    for draw in range(100):
        rng = np.random.default_rng(draw)
        p = scoped(make(cfg, draw), "levels.0.")
        randomize(p, rng, -3, 3)
        x = Tensor(rng.normal(size=(int(rng.integers(1, 12)), 8)))
        _, weights = attention(x, p, cfg.num_heads, return_weights=True)
        for w in weights:
            np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("T,expected", [(64, 32), (5, 3), (1, 1)])
def test_downsample_lengths(T, expected):
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2)
    p = scoped(make(cfg), "levels.0.")
    assert downsample(Tensor(np.zeros((T, 8))), p).shape == (expected, 8)


def test_downsample_delta_kernel_subsamples():
    p = {"down.kernel": Parameter("k", np.tile([[0.0], [1.0], [0.0]], (1, 3)))}
    x = np.arange(21.0).reshape(7, 3)
    np.testing.assert_array_equal(downsample(Tensor(x), p).data, x[[0, 2, 4, 6]])


def test_pyramid_lengths_t128():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, num_levels=6)
    pyr = build_pyramid(seq(128, 4), make(cfg), cfg)
    assert pyr.lengths == [64, 32, 16, 8, 4, 2]
    assert pyr.z0.shape == (128, 8)


def test_single_level_baseline():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, num_levels=1)
    pyr = build_pyramid(seq(20, 4), make(cfg), cfg)
    assert pyr.lengths == [10]


def test_short_sequence_warns_and_clamps(caplog):
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, num_levels=4)
    with caplog.at_level(logging.WARNING):
        pyr = build_pyramid(seq(5, 4), make(cfg), cfg)
    assert pyr.lengths == [3, 2, 1, 1]
    assert "clamp" in caplog.text


def test_level_lengths_iterated_ceil():
    rng = np.random.default_rng(0)
    for T in rng.integers(2, 1025, size=100):
        n, expect = int(T), []
        for _ in range(6):
            n = -(-n // 2)
            expect.append(n)
        assert level_lengths(int(T), 6) == expect


def test_zeroed_blocks_with_delta_kernels_subsample_z0():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, num_levels=3)
    params = make(cfg)
    for name, t in params.items():
        if ".attn." in name or ".mlp." in name:
            t.data[...] = 0.0
        if name.endswith("down.kernel"):
            t.data[...] = np.tile([[0.0], [1.0], [0.0]], (1, 8))
    pyr = build_pyramid(seq(19, 4), params, cfg)
    z0 = pyr.z0.data
    for l, z in enumerate(pyr.levels, start=1):
        np.testing.assert_array_equal(z.data, z0[::2 ** l])


def test_pyramid_deterministic():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, num_levels=3)
    a = build_pyramid(seq(30, 4), make(cfg, 5), cfg)
    b = build_pyramid(seq(30, 4), make(cfg, 5), cfg)
    for x, y in zip([a.z0] + a.levels, [b.z0] + b.levels):
        assert x.data.tobytes() == y.data.tobytes()


def test_conv_layer_ablation_runs():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, num_levels=3, layer_type="conv")
    params = make(cfg)
    assert not any(".attn." in k for k in params)
    assert build_pyramid(seq(16, 4), params, cfg).lengths == [8, 4, 2]


def test_positional_encoding_flag():
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, positional_encoding=True,
                        max_len=32)
    params = make(cfg)
    assert params["proj.pos"].shape == (32, 8)
    with pytest.raises(ConfigurationError):
        project(seq(40, 4), params, cfg)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PyramidConfig(model_dim=10, num_heads=4)
    with pytest.raises(ConfigurationError):
        PyramidConfig(num_levels=0)


@pytest.mark.parametrize("seed", range(20))
def test_pyramid_gradcheck(seed):
    cfg = PyramidConfig(input_dim=4, model_dim=8, num_heads=2, num_levels=2, mlp_ratio=2)
    rng = np.random.default_rng(seed)
    params = make(cfg, seed)
    randomize(params, rng)
    x = Tensor(rng.uniform(-1, 1, size=(8, 4)), requires_grad=True)
    keys = list(params)
    projs = [Tensor(rng.normal(size=s)) for s in [(8, 8), (4, 8), (2, 8)]]

    def f(xx, *ps):
        pyr = build_pyramid(xx, dict(zip(keys, ps)), cfg)
        out = Tensor(0.0)
        for z, w in zip([pyr.z0] + pyr.levels, projs):
            out = tc.add(out, tc.sum(tc.mul(z, w)))
        return out

    assert gradcheck(f, [x] + [params[k] for k in keys], coords=6, seed=seed) < 1e-4
