import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovtad.io import encode_features, encode_text_embeddings
from ovtad.synthetic import (
    InfeasiblePacking, SyntheticSpec, class_prototypes, generate_synthetic, linear_probe_cosine,
)


def dataset_bytes(spec):
    ds, text = generate_synthetic(spec)
    return b"".join(encode_features(v) for v in ds.videos) + encode_text_embeddings(text), ds


def test_fixed_seed_is_byte_identical():
    a, _ = dataset_bytes(SyntheticSpec(seed=5))
    b, _ = dataset_bytes(SyntheticSpec(seed=5))
    c, _ = dataset_bytes(SyntheticSpec(seed=6))
    assert a == b and a != c


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_segments_disjoint_and_in_range(seed, k):
    ds, _ = generate_synthetic(SyntheticSpec(n_videos=3, seed=seed, actions_per_video=(1, k)))
    for v in ds.videos:
        segs = sorted(ds.annotations[v.video_id], key=lambda s: s.start)
        assert 1 <= len(segs) <= k
        for s in segs:
            assert 0 <= s.start < s.end <= v.length
        for a, b in zip(segs, segs[1:]):
            assert a.end < b.start


def test_lengths_come_from_buckets():
    spec = SyntheticSpec(n_videos=20, seed=1)
    ds, _ = generate_synthetic(spec)
    for segs in ds.annotations.values():
        for s in segs:
            n = s.end - s.start
            assert any(lo <= n <= hi for lo, hi in spec.length_buckets)


def test_prototypes_orthonormal_by_default():
    P = class_prototypes(SyntheticSpec(n_classes=4), np.random.default_rng(0))
    np.testing.assert_allclose(P @ P.T, np.eye(4), atol=1e-12)


def test_low_rank_prototypes_are_unit_and_spanned():
    spec = SyntheticSpec(n_classes=8, prototype_rank=5)
    P = class_prototypes(spec, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1.0, atol=1e-12)
    assert np.linalg.matrix_rank(P, tol=1e-9) == 5


def test_linear_probe_learnability():
    ds, text = generate_synthetic(SyntheticSpec(n_videos=32, n_classes=8, seed=0))
    assert linear_probe_cosine(ds, text) >= 0.9


def test_infeasible_packing():
    spec = SyntheticSpec(T=20, length_buckets=[(15, 19)], actions_per_video=(2, 2))
    with pytest.raises(InfeasiblePacking):
        generate_synthetic(spec)


@pytest.mark.parametrize("kwargs", [
    {"T": 64},                                   # longest bucket must be < T
    {"length_buckets": [(5, 3)]},
    {"actions_per_video": (0, 2)},
    {"n_classes": 20, "D": 16},
])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SyntheticSpec(**kwargs)
