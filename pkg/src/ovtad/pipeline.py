"""End-to-end detection and evaluation over a set of videos."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .align import AlignmentConfig
from .data import ConfigurationError, Dataset, FeatureSequence, Segment, TextEmbeddingSet
from .evaluation import mean_ap
from .model import Model
from .postprocess import EvalConfig, classify_open_vocab, decode_candidates, soft_nms

THREADS_ENV = "OVTAD_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def detect_video(model: Model, video: FeatureSequence, text: TextEmbeddingSet,
                 cfg: EvalConfig, align: AlignmentConfig) -> list[Segment]:
    if video.dim != model.cfg.input_dim:
        raise ConfigurationError(
            f"{video.video_id}: feature dim {video.dim} != model input dim {model.cfg.input_dim}")
    if text.dim != model.cfg.model_dim:
        raise ConfigurationError(f"text dim {text.dim} != model dim {model.cfg.model_dim}")
    out = model.forward(video)
    cands = decode_candidates(model, video, cfg, output=out)
    kept = soft_nms(cands, cfg.softnms_sigma, cfg.softnms_score_floor)
    kept = kept[:cfg.max_detections_per_video]
    return classify_open_vocab(kept, out.pyramid, text, align)


def detect(model: Model, videos: list[FeatureSequence], text: TextEmbeddingSet,
           cfg: EvalConfig | None = None, align: AlignmentConfig | None = None,
           threads: int | None = None) -> list[Segment]:
    """Detections for every video, in input order regardless of thread count."""
    cfg = cfg or EvalConfig()
    align = align or AlignmentConfig()
    n = threads or default_threads()
    if n == 1 or len(videos) < 2:
        per_video = [detect_video(model, v, text, cfg, align) for v in videos]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            per_video = list(pool.map(lambda v: detect_video(model, v, text, cfg, align), videos))
    return [s for segs in per_video for s in segs]


def evaluate(model: Model, dataset: Dataset, video_ids: list[str], text: TextEmbeddingSet,
             cfg: EvalConfig | None = None, align: AlignmentConfig | None = None) -> dict:
    """Detect on ``video_ids`` and score against their annotations of ``text``'s classes."""
    cfg = cfg or EvalConfig()
    vids = [dataset.video(v) for v in video_ids]
    preds = detect(model, vids, text, cfg, align)
    classes = set(text.class_names)
    gts = [s for v in video_ids for s in dataset.annotations.get(v, []) if s.label in classes]
    return mean_ap(preds, gts, cfg.tiou_thresholds, list(text.class_names))
