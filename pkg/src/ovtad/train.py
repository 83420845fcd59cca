"""AdamW and the joint detection + alignment training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .align import AlignmentConfig, pool_segments, vta_loss
from .data import ConfigurationError, Dataset, TextEmbeddingSet
from .encoder import PyramidConfig, level_lengths
from .evaluation import SplitSpec, split_videos
from .losses import LossWeights, assign_target_arrays, mva_loss_parts, total_loss
from .model import Model
from .tensor import Tape

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite_step: int | None):
        super().__init__(f"non-finite loss at step {step}; last finite step: {last_finite_step}")
        self.step = step
        self.last_finite_step = last_finite_step


@dataclass
class TrainConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 20
    lr_schedule: str = "constant"  # or "cosine": decay to zero after warmup
    grad_clip: float | None = 1.0
    steps: int = 500
    batch_size: int = 4
    seed: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    warm = max(1, cfg.warmup_steps)
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    if cfg.lr_schedule == "cosine":
        frac = (step - warm) / max(1, cfg.steps - warm)
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.learning_rate


class AdamW:
    """Adam with weight decay applied directly to the weights (decoupled)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def decays(name: str) -> bool:
    # matrices decay; biases, norms, conv kernels and embeddings are left alone
    return name.endswith(".weight")


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= s
    return total


def video_loss(model: Model, video, segments, text: TextEmbeddingSet, class_pos: dict,
               cfg: TrainConfig, targets=None, rng=None):
    """(total, mva, vta) scalar tensors for one video."""
    out = model.forward(video, rng=rng)
    if targets is None:
        targets = assign_target_arrays(out.pyramid.lengths, segments, video.length)
    br, bc = mva_loss_parts(out.offsets, out.logits, targets, cfg.losses)
    mva = tc.add(br, tc.scale(bc, cfg.losses.lambda1))
    if segments:
        pooled = pool_segments(out.pyramid.z0, out.pyramid.levels,
                               [(s.start, s.end) for s in segments],
                               [class_pos[s.label] for s in segments])
        vta = vta_loss(pooled.z0, pooled.levels, text, pooled.class_index, cfg.alignment)
    else:
        vta = tc.Tensor(0.0)
    return total_loss(mva, vta, cfg.losses), mva, vta


def train(dataset: Dataset, text: TextEmbeddingSet, split: SplitSpec | None,
          cfg: TrainConfig, model: Model | None = None) -> tuple[Model, list[dict]]:
    """Optimise the total loss on the split's training videos.

    Returns the trained model and one log row per step. The text matrix seen by
    the alignment loss is restricted to the split's training classes.
    """
    train_classes = list(split.train_classes) if split else list(dataset.class_names)
    missing = set(train_classes) - set(dataset.class_names)
    if missing:
        raise ConfigurationError(f"split classes not in dataset: {sorted(missing)}")
    train_text = text.subset(train_classes)
    if train_text.dim != cfg.pyramid.model_dim:
        raise ConfigurationError(f"text dim {train_text.dim} != model_dim {cfg.pyramid.model_dim}")
    if dataset.videos and dataset.videos[0].dim != cfg.pyramid.input_dim:
        raise ConfigurationError(
            f"feature dim {dataset.videos[0].dim} != input_dim {cfg.pyramid.input_dim}")
    class_pos = {n: i for i, n in enumerate(train_classes)}

    ids = split_videos(dataset, split)[0] if split else [v.video_id for v in dataset.videos]
    if not ids:
        raise ConfigurationError("no training videos in split")
    videos = {v.video_id: v for v in dataset.videos}
    segments = {vid: dataset.annotations.get(vid, []) for vid in ids}
    for vid in ids:
        stray = {s.label for s in segments[vid]} - set(train_classes)
        assert not stray, f"{vid}: non-train classes {stray} reached the alignment loss"

    if model is None:
        model = Model.initialize(cfg.pyramid, cfg.seed)
    params = model.parameters()
    decay = [p for p in params if decays(p.name)]
    no_decay = [p for p in params if not decays(p.name)]
    opt_decay = AdamW(decay, cfg.learning_rate, cfg.betas, cfg.eps, cfg.weight_decay)
    opt_plain = AdamW(no_decay, cfg.learning_rate, cfg.betas, cfg.eps, 0.0)

    lengths = {}
    targets = {}
    for vid in ids:
        lengths[vid] = level_lengths(videos[vid].length, cfg.pyramid.num_levels)
        targets[vid] = assign_target_arrays(lengths[vid], segments[vid], videos[vid].length)

    rng = np.random.default_rng(cfg.seed + 1)
    drop_rng = np.random.default_rng(cfg.seed + 2) if cfg.pyramid.dropout_rate > 0 else None
    order: list[str] = []
    rows: list[dict] = []
    last_finite = None
    bs = min(cfg.batch_size, len(ids))
    for step in range(cfg.steps):
        if len(order) < bs:
            order.extend(ids[i] for i in rng.permutation(len(ids)))
        batch, order = order[:bs], order[bs:]
        model.zero_grad()
        with Tape() as tape:
            tot = mva_sum = vta_sum = None
            for vid in batch:
                t, m, v = video_loss(model, videos[vid], segments[vid], train_text, class_pos,
                                     cfg, targets[vid], drop_rng)
                tot = t if tot is None else tc.add(tot, t)
                mva_sum = m.item() + (mva_sum or 0.0)
                vta_sum = v.item() + (vta_sum or 0.0)
            loss = tc.scale(tot, 1.0 / len(batch))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, last_finite)
        last_finite = step
        tape.backward(loss)
        gnorm = clip_gradients(params, cfg.grad_clip) if cfg.grad_clip else float("nan")
        lr = learning_rate_at(cfg, step)
        opt_decay.step(lr)
        opt_plain.step(lr)
        rows.append({"step": step, "total": value, "mva": mva_sum / len(batch),
                     "vta": vta_sum / len(batch), "lr": lr, "grad_norm": gnorm})
    if cfg.log_path:
        write_log(cfg.log_path, rows)
    return model, rows


def write_log(path, rows: list[dict]) -> None:
    fields = ["step", "total", "mva", "vta", "lr", "grad_norm"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fields})
