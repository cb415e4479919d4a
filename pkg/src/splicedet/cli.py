"""Command-line entry point: ``splicedet <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data validation failure,
3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import checkpoint as ckpt
from .backbone import count_parameters
from .config import Config, ConfigError, smoke_config
from .dataset import (AnnotationError, build_dataset, dataset_stats, load_image, load_manifest, load_samples,
                      make_synthetic_fixture, validate_dataset, write_fixture)
from .evaluator import (EvaluationError, evaluate, forged_percentage, ground_truth_from_manifest,
                        predictions_to_json, read_predictions)
from .model import MaskRCNN, build_model, detect_image, detections_to_record

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ABORT = 0, 1, 2, 3
DATA_ROOT_ENV = "SPLICEDET_DATA_ROOT"
CONFIG_SNAPSHOT = "config.txt"
ABORTED_MARKER = "ABORTED"

OVERLAY_COLOR = (255, 40, 40)
OVERLAY_ALPHA = 0.45


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers -------------------------------------------------------------------

def data_path(p) -> Path:
    """Relative paths that do not exist are resolved against $SPLICEDET_DATA_ROOT."""
    path = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    if not path.is_absolute() and not path.exists() and root:
        return Path(root) / path
    return path


def effective_config(args) -> Config:
    base = smoke_config() if getattr(args, "profile", "full") == "smoke" else Config()
    text = base.dumps()
    if getattr(args, "config", None):
        text += Path(args.config).read_text()
    overrides = list(getattr(args, "override", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"SEED={args.seed}")
    return Config.loads(text, overrides)


def write_snapshot(out_dir, cfg: Config) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_SNAPSHOT)
    return out


def model_from_checkpoint(path, overrides=()) -> MaskRCNN:
    from .trainer import load_checkpoint
    _, meta = ckpt.load(path)
    cfg = Config.loads(meta["config"], list(overrides))
    model, _, _ = load_checkpoint(path, MaskRCNN(cfg))
    model.eval()
    return model


def render_overlay(image: np.ndarray, detections, draw_boxes: bool = True, draw_captions: bool = True,
                   color=OVERLAY_COLOR, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Translucent fill over every detection mask, plus optional box and
    ``spliced p=0.87 (4.2%)`` caption."""
    h, w = image.shape[:2]
    out = image.astype(np.float64).copy()
    union = np.zeros((h, w), dtype=bool)
    for d in detections:
        union |= np.asarray(d.image_mask).astype(bool)
    out[union] = (1 - alpha) * out[union] + alpha * np.asarray(color, dtype=np.float64)
    canvas = Image.fromarray(np.clip(np.round(out), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for d in detections:
        x1, y1, x2, y2 = d.box
        if draw_boxes:
            draw.rectangle([x1, y1, max(x1, x2 - 1), max(y1, y2 - 1)], outline=color, width=2)
        if draw_captions:
            pct = 100.0 * np.asarray(d.image_mask).astype(bool).sum() / (h * w)
            draw.text((x1 + 2, max(0, y1 - 12)), f"spliced p={d.score:.2f} ({pct:.1f}%)", fill=color)
    return np.asarray(canvas)


# --- commands ------------------------------------------------------------------

def cmd_dataset_build(args) -> int:
    out = Path(args.out)
    cfg = effective_config(args)
    manifest = build_dataset(data_path(args.images), data_path(args.annotations), out, seed=cfg.SEED,
                             counts=tuple(args.split_counts) if args.split_counts else None,
                             use_authentic=cfg.USE_AUTHENTIC)
    write_snapshot(out, cfg)
    n_masks = sum(len(e["masks"]) for e in manifest["entries"])
    print(f"wrote {len(manifest['entries'])} entries, {n_masks} region masks -> {out / 'manifest.json'}")
    for r in manifest["rejected_regions"]:
        print(f"rejected region {r['index']} in {r['filename']}: {r['reason']}", file=sys.stderr)
    return EXIT_OK


def cmd_dataset_validate(args) -> int:
    problems = validate_dataset(data_path(args.manifest))
    for p in problems:
        print(p, file=sys.stderr)
    print(f"{len(problems)} problem(s)")
    return EXIT_DATA if problems else EXIT_OK


def cmd_dataset_stats(args) -> int:
    manifest = load_manifest(data_path(args.manifest))
    stats = dataset_stats(manifest["entries"])
    print(f"total {stats['total']}")
    print(f"authentic {stats['authentic']}")
    print(f"spliced {stats['spliced']}")
    for cat, n in stats["authentic_by_category"].items():
        print(f"  authentic/{cat} {n}")
    for k, n in stats["regions_per_spliced"].items():
        print(f"  {k} regions: {n} image(s)")
    if args.json:
        print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_dataset_synth(args) -> int:
    cfg = effective_config(args)
    samples = make_synthetic_fixture(args.n, tuple(args.size), tuple(args.splices), seed=cfg.SEED,
                                     radius_range=tuple(args.radius) if args.radius else None,
                                     authentic_fraction=args.authentic_fraction)
    via = write_fixture(samples, args.out)
    print(f"wrote {len(samples)} images and {via}")
    return EXIT_OK


def _split_or_all(manifest, split):
    samples = load_samples(manifest, split)
    return samples if samples else load_samples(manifest)


def cmd_train(args) -> int:
    from .trainer import TrainConfig, TrainingAborted, evaluate_model, save_checkpoint, train
    cfg = effective_config(args)
    out = write_snapshot(args.out, cfg)
    manifest = load_manifest(data_path(args.data))
    samples = _split_or_all(manifest, "train")
    val = load_samples(manifest, "val") if args.validate else None
    tcfg = TrainConfig.from_config(cfg, **({"total_steps": args.total_steps} if args.total_steps else {}))
    model = build_model(cfg, cfg.SEED)
    try:
        result = train(model, samples, tcfg, out_dir=out, val_samples=val)
    except TrainingAborted as err:
        (out / ABORTED_MARKER).write_text(f"{err}\nlast checkpoint: {err.last_checkpoint}\n")
        print(err, file=sys.stderr)
        return EXIT_ABORT
    save_checkpoint(out / "final.ckpt", result.model, None, tcfg, len(result.log))
    if val:
        evaluate_model(result.model, val).write(out, "val_metrics")
    print(f"trained {len(result.log)} iterations; final loss {result.log[-1]['l_total']:.4f}")
    return EXIT_OK


def cmd_kfold(args) -> int:
    from .trainer import TrainConfig, TrainingAborted, kfold, run_kfold
    cfg = effective_config(args)
    out = write_snapshot(args.out, cfg)
    manifest = load_manifest(data_path(args.data))
    samples = [s for s in load_samples(manifest)
               if next(e for e in manifest["entries"] if e["id"] == s.source_id).get("split") != "test"]
    plan = kfold(samples, args.k, cfg.SEED)
    (out / "folds.json").write_text(json.dumps({"k": plan.k, "seed": plan.seed, "folds": plan.folds}, indent=1))
    for i in range(plan.k):
        write_snapshot(out / f"fold_{i}", cfg)
    tcfg = TrainConfig.from_config(cfg, **({"total_steps": args.total_steps} if args.total_steps else {}))
    try:
        result = run_kfold(lambda i: build_model(cfg, cfg.SEED), plan, tcfg, samples, out_dir=out)
    except TrainingAborted as err:
        (out / ABORTED_MARKER).write_text(f"{err}\n")
        print(err, file=sys.stderr)
        return EXIT_ABORT
    summary = {"k": plan.k, "per_fold": [r.to_dict() for r in result.reports], "mean": result.mean}
    (out / "mean_metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(result.mean, sort_keys=True))
    return EXIT_OK


def cmd_detect(args) -> int:
    overrides = list(args.override or [])
    if args.min_confidence is not None:
        overrides.append(f"DETECTION_MIN_CONFIDENCE={args.min_confidence}")
    model = model_from_checkpoint(data_path(args.checkpoint), overrides)
    out = write_snapshot(args.out, model.config)
    records = []
    for image_path in sorted(args.images):
        path = data_path(image_path)
        image = load_image(path)
        dets = detect_image(model, image)
        h, w = image.shape[:2]
        records.append(detections_to_record(path.stem, dets, h, w))
        pct = forged_percentage([d.image_mask for d in dets], h, w)[0]
        Image.fromarray(render_overlay(image, dets)).save(out / f"{path.stem}_overlay.png")
        print(f"{path.stem}: forged {pct:.2f}% ({len(dets)} region(s))")
    (out / "detections.json").write_text(json.dumps(predictions_to_json(records), indent=1))
    return EXIT_OK


def _ground_truth(path, split):
    path = data_path(path)
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and "entries" in doc:
        return ground_truth_from_manifest(path, split)
    return read_predictions(path)


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    preds = read_predictions(data_path(args.predictions))
    gts = _ground_truth(args.ground_truth, args.split)
    report = evaluate(preds, gts, cfg.MATCHING_IOU, cfg.IOU_KIND, with_coco=args.coco)
    if args.out:
        write_snapshot(args.out, cfg)
        report.write(args.out)
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = effective_config(args)
    report = count_parameters(build_model(cfg, cfg.SEED))
    print(report.format(breakdown=args.per_layer))
    if args.out:
        write_snapshot(args.out, cfg)
        (Path(args.out) / "params.txt").write_text(report.format() + "\n")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key-value config file")
    common.add_argument("--override", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=("full", "smoke"), default="full",
                        help="base config: full model or the reduced-width smoke profile")

    p = _Parser(prog="splicedet", description="Multiple image splicing detection with Mask R-CNN.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="build, validate or inspect a dataset")
    dsub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = dsub.add_parser("build", parents=[common], help="rasterize VIA polygons into masks + manifest")
    b.add_argument("--images", required=True)
    b.add_argument("--annotations", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--split-counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="split sizes (default: 734/92/92 proportions)")
    b.set_defaults(func=cmd_dataset_build)
    v = dsub.add_parser("validate", help="re-rasterize and compare stored masks")
    v.add_argument("manifest")
    v.set_defaults(func=cmd_dataset_validate)
    s = dsub.add_parser("stats", help="authentic / spliced composition counts")
    s.add_argument("manifest")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_dataset_stats)
    y = dsub.add_parser("synth", parents=[common], help="write a synthetic spliced-image fixture")
    y.add_argument("--out", required=True)
    y.add_argument("--n", type=int, default=20)
    y.add_argument("--size", type=int, nargs=2, default=(256, 384), metavar=("H", "W"))
    y.add_argument("--splices", type=int, nargs=2, default=(3, 7), metavar=("MIN", "MAX"))
    y.add_argument("--radius", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="patch radius range in pixels (default: scaled to the image)")
    y.add_argument("--authentic-fraction", type=float, default=0.0)
    y.set_defaults(func=cmd_dataset_synth)

    for name, func, help_ in (("train", cmd_train, "train a model"), ("kfold", cmd_kfold, "k-fold cross-validation")):
        t = sub.add_parser(name, parents=[common], help=help_)
        t.add_argument("--data", required=True, help="manifest.json")
        t.add_argument("--out", required=True)
        t.add_argument("--total-steps", type=int, help="literal iteration count instead of epochs x steps")
        if name == "train":
            t.add_argument("--validate", action="store_true", help="track validation F1 and keep best.ckpt")
        else:
            t.add_argument("--k", type=int, default=5)
        t.set_defaults(func=func)

    d = sub.add_parser("detect", help="detect spliced regions in images")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--override", action="append", metavar="KEY=VALUE")
    d.add_argument("--min-confidence", type=float)
    d.add_argument("images", nargs="+")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    e.add_argument("--predictions", required=True)
    e.add_argument("--ground-truth", required=True, help="manifest.json or a predictions-format file")
    e.add_argument("--split")
    e.add_argument("--out")
    e.add_argument("--coco", action="store_true", help="also report AP averaged over IoU 0.50:0.95")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("params", parents=[common], help="parameter accounting")
    pr.add_argument("--per-layer", action="store_true")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (AnnotationError, EvaluationError, FileNotFoundError, json.JSONDecodeError, KeyError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, FloatingPointError) as err:
        out = getattr(args, "out", None)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / ABORTED_MARKER).write_text(f"{err}\n")
        print(f"aborted: {err}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
