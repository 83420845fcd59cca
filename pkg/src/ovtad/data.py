"""Core record types shared across the package."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNASSIGNED = "UNASSIGNED"


class ConfigurationError(ValueError):
    """Model, data and configuration dimensions disagree."""


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray  # T x D
    frame_rate_hint: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.video_id}: features must be T x D with T >= 1, "
                             f"got {self.features.shape}")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Segment:
    video_id: str
    start: float
    end: float
    label: str = UNASSIGNED
    score: float = 1.0

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"{self.video_id}: segment end {self.end} <= start {self.start}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"{self.video_id}: score {self.score} outside [0, 1]")


@dataclass
class TextEmbeddingSet:
    class_names: list[str]
    embeddings: np.ndarray  # M x D'
    source_tag: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.class_names) < 1:
            raise ValueError("text embedding set needs at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            dupes = sorted({n for n in self.class_names if self.class_names.count(n) > 1})
            raise ValueError(f"duplicate class names: {dupes}")
        if self.embeddings.shape[0] != len(self.class_names) or self.embeddings.ndim != 2:
            raise ValueError(f"embeddings shape {self.embeddings.shape} does not match "
                             f"{len(self.class_names)} class names")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def subset(self, names: list[str]) -> "TextEmbeddingSet":
        """Rows for ``names`` in the given order."""
        pos = {n: i for i, n in enumerate(self.class_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise KeyError(f"classes not in embedding set: {missing}")
        return TextEmbeddingSet(list(names), self.embeddings[[pos[n] for n in names]],
                                self.source_tag)


@dataclass
class Dataset:
    videos: list[FeatureSequence]
    annotations: dict[str, list[Segment]]
    class_names: list[str]
    frame_rates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        ids = {v.video_id: v for v in self.videos}
        known = set(self.class_names)
        for vid, segs in self.annotations.items():
            if vid not in ids:
                raise ValueError(f"annotation for unknown video {vid!r}")
            T = ids[vid].length
            for s in segs:
                if s.label not in known:
                    raise ValueError(f"{vid}: label {s.label!r} not in class list")
                if s.start < 0 or s.end > T:
                    raise ValueError(f"{vid}: segment ({s.start}, {s.end}) outside [0, {T}]")

    def video(self, video_id: str) -> FeatureSequence:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)
