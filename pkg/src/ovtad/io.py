"""Binary feature/text formats, annotation and result JSON, checkpoints.

OVTF1 (features):  b"OVTF1" | u32 T | u32 D | f64 frame_rate | T*D f32, row-major
OVTE1 (text):      b"OVTE1" | u32 M | u32 D | M x (u16 n, n bytes UTF-8) | M*D f32
OVCK1 (checkpoint): b"OVCK1" | u32 n | n bytes JSON header | f64 parameter payload

All integers and floats are little-endian.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import Dataset, FeatureSequence, Segment, TextEmbeddingSet
from .encoder import PyramidConfig
from .model import Model
from .tensor import Parameter

FEATURE_MAGIC = b"OVTF1"
TEXT_MAGIC = b"OVTE1"
CHECKPOINT_MAGIC = b"OVCK1"
ANNOTATION_VERSION = "1.0"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated {what}: expected {n} bytes, "
                              f"got {len(self.buf) - self.pos}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"{self.path}: bad magic {got!r}, expected {expected!r}", 0)

    def floats(self, count: int, what: str) -> np.ndarray:
        need = count * 4
        if need > len(self.buf) - self.pos:
            raise FormatError(f"{self.path}: truncated {what}: expected {need} bytes, "
                              f"got {len(self.buf) - self.pos}", self.pos)
        return np.frombuffer(self.take(need, what), dtype="<f4").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes", self.pos)


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def encode_features(seq: FeatureSequence) -> bytes:
    T, D = seq.features.shape
    return (FEATURE_MAGIC + struct.pack("<IId", T, D, float(seq.frame_rate_hint))
            + seq.features.astype("<f4").tobytes())


def decode_features(buf: bytes, video_id: str, path="<bytes>") -> FeatureSequence:
    r = _Reader(buf, path)
    r.magic(FEATURE_MAGIC)
    T, D, fps = r.unpack("<IId", "header")
    if T < 1 or D < 1:
        raise FormatError(f"{path}: empty feature matrix T={T} D={D}", 5)
    data = r.floats(T * D, "feature payload")
    r.done()
    return FeatureSequence(video_id, data.reshape(T, D), fps)


def save_features(path, seq: FeatureSequence) -> None:
    Path(path).write_bytes(encode_features(seq))


def load_features(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    return decode_features(_read_bytes(path), video_id or path.stem, path)


def encode_text_embeddings(text: TextEmbeddingSet) -> bytes:
    M, D = text.embeddings.shape
    parts = [TEXT_MAGIC, struct.pack("<II", M, D)]
    for name in text.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(text.embeddings.astype("<f4").tobytes())
    return b"".join(parts)


def decode_text_embeddings(buf: bytes, path="<bytes>", source_tag: str = "") -> TextEmbeddingSet:
    r = _Reader(buf, path)
    r.magic(TEXT_MAGIC)
    M, D = r.unpack("<II", "header")
    if M < 1:
        raise FormatError(f"{path}: empty class set", 5)
    names = []
    for _ in range(M):
        (n,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            names.append(r.take(n, "class name").decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: class name is not UTF-8", at) from e
    data = r.floats(M * D, "embedding payload")
    r.done()
    try:
        return TextEmbeddingSet(names, data.reshape(M, D), source_tag or str(path))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def save_text_embeddings(path, text: TextEmbeddingSet) -> None:
    Path(path).write_bytes(encode_text_embeddings(text))


def load_text_embeddings(path) -> TextEmbeddingSet:
    return decode_text_embeddings(_read_bytes(path), path)


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------

def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def annotations_to_json(annotations: dict[str, list[Segment]], durations: dict[str, int],
                        frame_rates: dict[str, float] | None = None) -> str:
    db = {}
    for vid in sorted(durations):
        entry = {
            "duration_frames": int(durations[vid]),
            "annotations": [{"label": s.label, "segment_frames": [s.start, s.end]}
                            for s in annotations.get(vid, [])],
        }
        if frame_rates and vid in frame_rates:
            entry["frame_rate"] = frame_rates[vid]
        db[vid] = entry
    return _dump_json({"version": ANNOTATION_VERSION, "database": db})


def parse_annotations(doc: dict, source="<json>") -> tuple[dict, dict, dict]:
    """Validate an annotation document; returns (annotations, durations, frame rates)."""
    if not isinstance(doc, dict) or doc.get("version") != ANNOTATION_VERSION:
        raise FormatError(f"{source}: unsupported annotation schema version "
                          f"{doc.get('version') if isinstance(doc, dict) else None!r}")
    db = doc.get("database")
    if not isinstance(db, dict):
        raise FormatError(f"{source}: missing 'database' object")
    problems, annotations, durations, rates = [], {}, {}, {}
    for vid, entry in db.items():
        try:
            dur = entry["duration_frames"]
            items = entry["annotations"]
        except (KeyError, TypeError):
            problems.append(f"{vid}: missing duration_frames/annotations")
            continue
        durations[vid] = dur
        rates[vid] = float(entry.get("frame_rate", 1.0))
        segs = []
        for k, a in enumerate(items):
            try:
                label = a["label"]
                s, e = (float(v) for v in a["segment_frames"])
            except (KeyError, TypeError, ValueError):
                problems.append(f"{vid}[{k}]: malformed annotation")
                continue
            if not s < e:
                problems.append(f"{vid}[{k}]: start {s} >= end {e}")
            elif s < 0 or e > dur:
                problems.append(f"{vid}[{k}]: segment ({s}, {e}) outside [0, {dur}]")
            else:
                segs.append(Segment(vid, s, e, label))
        annotations[vid] = segs
    if problems:
        raise FormatError(f"{source}: invalid annotations:\n  " + "\n  ".join(problems))
    return annotations, durations, rates


def load_annotations(path) -> tuple[dict, dict, dict]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON: {e}") from e
    return parse_annotations(doc, path)


def detections_to_json(segments: list[Segment], frame_rates: dict[str, float]) -> str:
    rows = []
    for s in segments:
        fps = frame_rates.get(s.video_id, 1.0)
        rows.append({"video_id": s.video_id, "start_sec": s.start / fps,
                     "end_sec": s.end / fps, "label": s.label, "score": s.score})
    return _dump_json(rows)


def parse_detections(doc, source="<json>") -> list[Segment]:
    if not isinstance(doc, list):
        raise FormatError(f"{source}: detections must be a JSON array")
    out = []
    for k, row in enumerate(doc):
        try:
            out.append(Segment(str(row["video_id"]), float(row["start_sec"]),
                               float(row["end_sec"]), str(row["label"]), float(row["score"])))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{source}: detection {k} invalid: {e}") from e
    return out


def load_detections(path) -> list[Segment]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON: {e}") from e
    return parse_detections(doc, path)


def report_to_json(report: dict) -> str:
    return _dump_json(report)


# --------------------------------------------------------------------------
# dataset directories
# --------------------------------------------------------------------------

def save_dataset(root, dataset: Dataset, text: TextEmbeddingSet) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    for v in dataset.videos:
        save_features(root / "features" / f"{v.video_id}.ovtf", v)
    save_text_embeddings(root / "text.ovte", text)
    durations = {v.video_id: v.length for v in dataset.videos}
    rates = {v.video_id: v.frame_rate_hint for v in dataset.videos}
    (root / "annotations.json").write_text(
        annotations_to_json(dataset.annotations, durations, rates), encoding="utf-8")


def load_dataset(root) -> tuple[Dataset, TextEmbeddingSet]:
    root = Path(root)
    text = load_text_embeddings(root / "text.ovte")
    annotations, durations, rates = load_annotations(root / "annotations.json")
    videos = []
    for vid in sorted(durations):
        seq = load_features(root / "features" / f"{vid}.ovtf", vid)
        if seq.length != durations[vid]:
            raise FormatError(f"{vid}: feature length {seq.length} != duration {durations[vid]}")
        videos.append(seq)
    return Dataset(videos, annotations, list(text.class_names), rates), text


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def encode_checkpoint(model, meta: dict | None = None) -> bytes:
    names = list(model.params)
    header = {
        "config": asdict(model.cfg),
        "params": [[n, list(model.params[n].shape)] for n in names],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(model.params[n].data.astype("<f8").tobytes() for n in names)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hb)) + hb + payload


def decode_checkpoint(buf: bytes, path="<bytes>"):
    r = _Reader(buf, path)
    r.magic(CHECKPOINT_MAGIC)
    (n,) = r.unpack("<I", "header length")
    header = json.loads(r.take(n, "header").decode("utf-8"))
    cfg = PyramidConfig(**header["config"])
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * count, f"parameter {name}"), dtype="<f8")
        params[name] = Parameter(name, arr.reshape(shape))
    r.done()
    return Model(cfg, params), header.get("meta", {})


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, meta))


def load_checkpoint(path):
    return decode_checkpoint(_read_bytes(path), path)
