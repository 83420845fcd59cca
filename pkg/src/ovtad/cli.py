"""Command-line interface: ``ovtad <synth|split|train|detect|eval|gradcheck>``.

Every subcommand takes ``--config FILE`` (YAML), repeated ``--set
section.key=value`` overrides and ``--seed``. Exit codes: 0 success,
1 invalid input (bad flag, missing file, malformed data or config),
2 runtime failure (divergence, failed gradcheck, unexpected error).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .align import AlignmentConfig
from .data import ConfigurationError, Dataset, Segment
from .diagnostics import run_all
from .encoder import PyramidConfig
from .evaluation import SplitSpec, make_splits, mean_ap, split_videos
from .io import (
    detections_to_json, load_checkpoint, load_dataset, load_detections, load_text_embeddings,
    report_to_json, save_checkpoint, save_dataset,
)
from .losses import LossWeights
from .pipeline import detect
from .postprocess import EvalConfig
from .synthetic import SyntheticSpec, generate_synthetic
from .train import TrainConfig, TrainingDiverged, train, write_log

log = logging.getLogger("ovtad")

SPLIT_DEFAULTS = {"fraction": 0.75, "n_splits": 1}
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Invalid command-line usage; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _parse_override(item: str) -> tuple[list[str], object]:
    key, sep, raw = item.partition("=")
    if not sep or "." not in key:
        raise UsageError(f"--set expects section.key=value, got {item!r}")
    return key.split("."), yaml.safe_load(raw)


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                cfg = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"{path}: not valid YAML: {e}") from e
        if not isinstance(cfg, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping of sections")
    for item in overrides or []:
        keys, value = _parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"--set {item}: {k} is not a section")
        node[keys[-1]] = value
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigurationError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _build(cls, values: dict, section: str, exclude=()):
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    values = dict(values)
    for k, v in values.items():
        # YAML reads exponent-only numbers such as 1e-3 as strings
        if isinstance(v, str) and str(fields[k].type).startswith("float"):
            try:
                values[k] = float(v)
            except ValueError as e:
                raise ConfigurationError(f"[{section}] {k}: expected a number, got {v!r}") from e
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"[{section}]: {e}") from e


def _train_config(cfg: dict, dataset: Dataset, text, seed: int | None) -> TrainConfig:
    pyr = _section(cfg, "pyramid")
    pyr.setdefault("input_dim", dataset.videos[0].dim)
    pyr.setdefault("model_dim", text.dim)
    tr = _section(cfg, "train")
    if seed is not None:
        tr["seed"] = seed
    tc = _build(TrainConfig, tr, "train", exclude=("pyramid", "losses", "alignment"))
    tc.pyramid = _build(PyramidConfig, pyr, "pyramid")
    tc.losses = _build(LossWeights, _section(cfg, "losses"), "losses")
    tc.alignment = _build(AlignmentConfig, _section(cfg, "alignment"), "alignment")
    return tc


def _split_settings(cfg: dict) -> dict:
    out = dict(SPLIT_DEFAULTS)
    sec = _section(cfg, "split")
    unknown = sorted(set(sec) - set(SPLIT_DEFAULTS) - {"seed"})
    if unknown:
        raise ConfigurationError(f"unknown keys in [split]: {', '.join(unknown)}")
    out.update(sec)
    return out


# --------------------------------------------------------------------------
# split files
# --------------------------------------------------------------------------

def _splits_to_json(splits: list[SplitSpec]) -> str:
    return json.dumps({"splits": [dataclasses.asdict(s) for s in splits]},
                      indent=2, sort_keys=True) + "\n"


def _load_split(path: str, index: int) -> SplitSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: not valid JSON: {e}") from e
    splits = doc.get("splits") if isinstance(doc, dict) else None
    if not isinstance(splits, list) or not splits:
        raise ConfigurationError(f"{path}: expected a non-empty 'splits' list")
    if not 0 <= index < len(splits):
        raise ConfigurationError(f"{path}: split index {index} out of range 0..{len(splits) - 1}")
    try:
        return SplitSpec(**splits[index])
    except TypeError as e:
        raise ConfigurationError(f"{path}: malformed split: {e}") from e


def _subset(dataset: Dataset, args) -> tuple[list[str], list[str]]:
    """(video ids, class names) selected by --split/--subset."""
    all_ids = [v.video_id for v in dataset.videos]
    if not args.split:
        if args.subset != "all":
            raise UsageError("--subset train/test needs --split")
        return all_ids, list(dataset.class_names)
    split = _load_split(args.split, args.split_index)
    unknown = set(split.train_classes + split.test_classes) - set(dataset.class_names)
    if unknown:
        raise ConfigurationError(f"{args.split}: classes not in dataset: {sorted(unknown)}")
    train_ids, test_ids = split_videos(dataset, split)
    if args.subset == "train":
        return train_ids, list(split.train_classes)
    if args.subset == "test":
        return test_ids, list(split.test_classes)
    return all_ids, list(dataset.class_names)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    spec_kw = _section(cfg, "synthetic")
    if args.seed is not None:
        spec_kw["seed"] = args.seed
    spec = _build(SyntheticSpec, spec_kw, "synthetic")
    dataset, text = generate_synthetic(spec)
    save_dataset(args.out, dataset, text)
    n_act = sum(len(s) for s in dataset.annotations.values())
    print(f"wrote {len(dataset.videos)} videos, {n_act} actions, "
          f"{len(text.class_names)} classes to {args.out}")
    return 0


def cmd_split(args, cfg) -> int:
    text = load_text_embeddings(Path(args.data) / "text.ovte")
    s = _split_settings(cfg)
    seed = args.seed if args.seed is not None else int(s.get("seed", 0))
    splits = make_splits(list(text.class_names), float(s["fraction"]), int(s["n_splits"]), seed)
    Path(args.out).write_text(_splits_to_json(splits), encoding="utf-8")
    print(f"wrote {len(splits)} split(s) to {args.out}")
    return 0


def cmd_train(args, cfg) -> int:
    dataset, text = load_dataset(args.data)
    split = _load_split(args.split, args.split_index) if args.split else None
    tcfg = _train_config(cfg, dataset, text, args.seed)
    model, rows = train(dataset, text, split, tcfg)
    meta = {"steps": tcfg.steps, "seed": tcfg.seed,
            "train_classes": list(split.train_classes) if split else list(dataset.class_names)}
    save_checkpoint(args.out, model, meta)
    if args.log:
        write_log(args.log, rows)
    if rows:
        print(f"trained {len(rows)} steps: total loss {rows[0]['total']:.4f} -> "
              f"{rows[-1]['total']:.4f}; checkpoint {args.out}")
    else:
        print(f"zero steps; wrote initial checkpoint {args.out}")
    return 0


def cmd_detect(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset, text = load_dataset(args.data)
    if args.text:
        text = load_text_embeddings(args.text)
    ids, classes = _subset(dataset, args)
    missing = [c for c in classes if c not in text.class_names]
    if missing:
        raise ConfigurationError(f"text embeddings lack classes {missing}")
    ecfg = _build(EvalConfig, _section(cfg, "eval"), "eval")
    acfg = _build(AlignmentConfig, _section(cfg, "alignment"), "alignment")
    dets = detect(model, [dataset.video(v) for v in ids], text.subset(classes), ecfg, acfg)
    rates = {v.video_id: v.frame_rate_hint for v in dataset.videos}
    rates.update(dataset.frame_rates)
    Path(args.out).write_text(detections_to_json(dets, rates), encoding="utf-8")
    print(f"wrote {len(dets)} detections for {len(ids)} videos to {args.out}")
    return 0


def cmd_eval(args, cfg) -> int:
    dataset, _ = load_dataset(args.data)
    preds = load_detections(args.detections)
    ids, classes = _subset(dataset, args)
    ecfg = _build(EvalConfig, _section(cfg, "eval"), "eval")
    keep_ids, keep_cls = set(ids), set(classes)
    rates = {v.video_id: v.frame_rate_hint for v in dataset.videos}
    rates.update(dataset.frame_rates)
    # detections are in seconds; bring ground truth to the same unit
    gts = [Segment(s.video_id, s.start / rates[v], s.end / rates[v], s.label)
           for v in ids for s in dataset.annotations.get(v, []) if s.label in keep_cls]
    preds = [p for p in preds if p.video_id in keep_ids]
    report = mean_ap(preds, gts, ecfg.tiou_thresholds, classes)
    Path(args.out).write_text(report_to_json(report), encoding="utf-8")
    maps = ", ".join(f"{t:.2f}:{m:.4f}" for t, m in zip(report["tiou_thresholds"], report["map"]))
    print(f"mAP@tIoU {maps}; average {report['average_map']:.4f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    errors = run_all(args.seeds)
    ok = True
    for path, err in errors.items():
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{path:<10} max relative error {err:.3e}  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 2


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config with sections synthetic, split, pyramid, "
                        "losses, alignment, train, eval")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="random seed for this command")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="ovtad", description="Open-vocabulary temporal action detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("split", parents=[common], help="draw open-vocabulary class splits")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output split JSON")

    def subset_args(p):
        p.add_argument("--split", help="split JSON written by `ovtad split`")
        p.add_argument("--split-index", type=int, default=0)
        p.add_argument("--subset", choices=["all", "train", "test"], default="all",
                       help="videos and classes to use (train/test need --split)")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="per-step CSV loss log")
    p.add_argument("--split", help="split JSON; trains on its training classes only")
    p.add_argument("--split-index", type=int, default=0)

    p = sub.add_parser("detect", parents=[common], help="write detections for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--text", help="text embeddings (default: the dataset's text.ovte)")
    p.add_argument("--out", required=True, help="output detection JSON")
    subset_args(p)

    p = sub.add_parser("eval", parents=[common], help="score detections against annotations")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--detections", required=True, help="detection JSON")
    p.add_argument("--out", required=True, help="output report JSON")
    subset_args(p)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of the composite training paths")
    p.add_argument("--seeds", type=int, default=20)
    return parser


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "detect": cmd_detect,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as e:
        print(f"ovtad: error: file not found: {e.filename}", file=sys.stderr)
        return 1
    except IsADirectoryError as e:
        print(f"ovtad: error: expected a file, got directory: {e.filename}", file=sys.stderr)
        return 1
    except (UsageError, ValueError, KeyError) as e:
        # ConfigurationError and FormatError are ValueErrors
        print(f"ovtad: error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"ovtad: training diverged: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        log.debug("unhandled error", exc_info=True)
        print(f"ovtad: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
