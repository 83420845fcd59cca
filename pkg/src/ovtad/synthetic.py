"""Seeded synthetic feature sequences with planted actions of bucketed lengths."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, FeatureSequence, Segment, TextEmbeddingSet


@dataclass
class SyntheticSpec:
    n_videos: int = 8
    T: int = 128
    D: int = 16
    n_classes: int = 4
    actions_per_video: tuple[int, int] = (3, 3)
    length_buckets: list[tuple[int, int]] = field(
        default_factory=lambda: [(4, 8), (12, 24), (40, 80)])
    noise_std: float = 0.1
    text_dim: int = 32
    text_noise_std: float = 0.01
    text_map_seed: int = 1
    seed: int = 0
    frame_rate: float = 1.0
    # None keeps prototypes orthonormal; an int r < n_classes draws them from a
    # shared r-dimensional subspace so unseen classes are combinations of seen ones
    prototype_rank: int | None = None

    def __post_init__(self):
        self.actions_per_video = tuple(self.actions_per_video)
        self.length_buckets = [tuple(b) for b in self.length_buckets]
        if max(hi for _, hi in self.length_buckets) >= self.T:
            raise ValueError("longest length bucket must be shorter than T")
        if any(lo < 1 or hi < lo for lo, hi in self.length_buckets):
            raise ValueError("length buckets must satisfy 1 <= lo <= hi")
        lo, hi = self.actions_per_video
        if lo < 1 or hi < lo:
            raise ValueError("actions_per_video must satisfy 1 <= lo <= hi")
        rank = self.prototype_rank or self.n_classes
        if rank > self.D:
            raise ValueError(f"cannot place {rank} orthonormal directions in D={self.D}")


class InfeasiblePacking(ValueError):
    pass


def _spread_unit_vectors(rng, n: int, r: int, tries: int = 200) -> np.ndarray:
    """n unit vectors in R^r with small worst-case coherence (best of random draws)."""
    best, best_coh = None, np.inf
    for _ in range(tries):
        v = rng.normal(size=(n, r))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        g = np.abs(v @ v.T - np.eye(n))
        coh = g.max()
        if coh < best_coh:
            best, best_coh = v, coh
    return best


def class_prototypes(spec: SyntheticSpec, rng) -> np.ndarray:
    """n_classes x D unit rows."""
    q, _ = np.linalg.qr(rng.normal(size=(spec.D, spec.D)))
    rank = spec.prototype_rank
    if rank is None or rank >= spec.n_classes:
        return q[:, :spec.n_classes].T.copy()
    coeff = _spread_unit_vectors(rng, spec.n_classes, rank)
    return coeff @ q[:, :rank].T


def _place(rng, lengths: list[int], T: int) -> list[int]:
    # one background frame between consecutive actions keeps them separable
    free = T - sum(lengths) - (len(lengths) - 1)
    if free < 0:
        raise InfeasiblePacking(f"actions of total length {sum(lengths)} do not fit in T={T}")
    cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    starts, pos = [], 0
    prev = 0
    for c, n in zip(cuts, lengths):
        pos += int(c - prev)
        prev = c
        starts.append(pos)
        pos += n + 1
    return starts


def _draw_lengths(rng, spec: SyntheticSpec, k: int, attempts: int = 100) -> list[int]:
    """Bucketed action lengths that fit in T; redraws when a draw overflows."""
    for _ in range(attempts):
        buckets = rng.integers(0, len(spec.length_buckets), size=k)
        lengths = [int(rng.integers(spec.length_buckets[b][0], spec.length_buckets[b][1] + 1))
                   for b in buckets]
        if sum(lengths) + k - 1 <= spec.T:
            return lengths
    raise InfeasiblePacking(f"could not fit {k} actions from buckets {spec.length_buckets} "
                            f"in T={spec.T} after {attempts} draws")


def _f32(x: np.ndarray) -> np.ndarray:
    # the on-disk formats store float32; quantizing here makes files and memory agree
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, TextEmbeddingSet]:
    rng = np.random.default_rng(spec.seed)
    protos = class_prototypes(spec, rng)
    text_rng = np.random.default_rng(spec.text_map_seed)
    P = text_rng.normal(size=(spec.text_dim, spec.D)) / np.sqrt(spec.D)
    A = protos @ P.T + spec.text_noise_std * text_rng.normal(size=(spec.n_classes, spec.text_dim))
    names = [f"action_{c:02d}" for c in range(spec.n_classes)]

    videos, annotations = [], {}
    for v in range(spec.n_videos):
        vid = f"video_{v:04d}"
        k = int(rng.integers(spec.actions_per_video[0], spec.actions_per_video[1] + 1))
        lengths = _draw_lengths(rng, spec, k)
        starts = _place(rng, lengths, spec.T)
        labels = rng.integers(0, spec.n_classes, size=k)
        X = spec.noise_std * rng.normal(size=(spec.T, spec.D))
        segs = []
        for s, n, c in zip(starts, lengths, labels):
            X[s:s + n] += protos[c]
            segs.append(Segment(vid, float(s), float(s + n), names[c]))
        videos.append(FeatureSequence(vid, _f32(X), spec.frame_rate))
        annotations[vid] = segs
    dataset = Dataset(videos, annotations, names)
    text = TextEmbeddingSet(names, _f32(A), f"synthetic:text_map_seed={spec.text_map_seed}")
    return dataset, text


def linear_probe_cosine(dataset: Dataset, text: TextEmbeddingSet) -> float:
    """Mean cosine of a least-squares map from pooled action features to their text rows."""
    pos = {n: i for i, n in enumerate(text.class_names)}
    X, Y = [], []
    for v in dataset.videos:
        for s in dataset.annotations.get(v.video_id, []):
            X.append(v.features[int(s.start):int(np.ceil(s.end))].mean(axis=0))
            Y.append(text.embeddings[pos[s.label]])
    X, Y = np.array(X), np.array(Y)
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    pred = X @ W
    cos = (pred * Y).sum(1) / (np.linalg.norm(pred, axis=1) * np.linalg.norm(Y, axis=1))
    return float(cos.mean())
