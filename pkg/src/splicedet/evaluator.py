"""Detection and segmentation metrics, forged-area percentage, and the
predictions / report file formats.

Predictions JSON is a list of per-image objects::

    {"image_id": str, "height": int, "width": int,
     "forged_percentage": float,
     "detections": [{"box": [x1, y1, x2, y2], "score": float, "class_id": int,
                     "mask": {"size": [H, W], "counts": [int, ...]}
                     | "mask_png_path": str}]}

``counts`` is a run-length encoding of the binary mask flattened in
row-major order: alternating run lengths starting with a run of zeros
(which may be 0), summing to H * W.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .dataset import load_mask_png, mask_to_box
from .rpn import box_iou


class EvaluationError(ValueError):
    pass


@dataclass
class Instance:
    box: tuple
    mask: np.ndarray | None = None
    score: float | None = None
    class_id: int = 1


@dataclass
class ImageRecord:
    image_id: str
    height: int
    width: int
    instances: list = field(default_factory=list)


# --- primitives ---------------------------------------------------------------

def mask_iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(preds, gts, iou_kind: str = "mask") -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    if iou_kind == "box":
        return box_iou([p.box for p in preds], [g.box for g in gts]).numpy()
    pm = np.stack([np.asarray(p.mask).astype(bool).reshape(-1) for p in preds]).astype(np.float64)
    gm = np.stack([np.asarray(g.mask).astype(bool).reshape(-1) for g in gts]).astype(np.float64)
    inter = pm @ gm.T
    union = pm.sum(1)[:, None] + gm.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _score_order(preds):
    scores = np.array([p.score if p.score is not None else 0.0 for p in preds], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def match_detections(preds, gts, iou_threshold: float = 0.5, iou_kind: str = "mask"):
    """Greedy one-to-one matching: predictions in descending score order each
    take the still-unmatched GT of highest IoU, provided IoU >= threshold.

    Returns ``(tp, fp, fn, pairs)`` with pairs as (pred index, gt index).
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    ious = iou_matrix(preds, gts, iou_kind)
    taken = np.zeros(len(gts), dtype=bool)
    pairs = []
    for i in _score_order(preds):
        if not len(gts):
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            pairs.append((int(i), j))
    tp = len(pairs)
    return tp, len(preds) - tp, len(gts) - tp, pairs


def precision_recall_f1(tp, fp, fn=None):
    """(P, R, F1) from counts. Called with two floats it treats them as
    (precision, recall) and only forms the harmonic mean."""
    if fn is None:
        p, r = float(tp), float(fp)
    else:
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


# --- average precision ----------------------------------------------------------

def pr_curve(preds_by_image: dict, gts_by_image: dict, iou_threshold: float, iou_kind: str = "mask"):
    """Dataset-wide (precision, recall) arrays in descending score order, and
    the number of GT instances."""
    records = []  # (score, image order, det index, is_tp)
    n_gt = 0
    for order, image_id in enumerate(sorted(gts_by_image)):
        gts = gts_by_image[image_id]
        preds = preds_by_image.get(image_id, [])
        n_gt += len(gts)
        _, _, _, pairs = match_detections(preds, gts, iou_threshold, iou_kind)
        matched = {p for p, _ in pairs}
        for i, p in enumerate(preds):
            records.append((p.score, order, i, i in matched))
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = np.cumsum([r[3] for r in records], dtype=np.float64)
    fp = np.cumsum([not r[3] for r in records], dtype=np.float64)
    if not records:
        return np.zeros(0), np.zeros(0), n_gt
    precision = tp / (tp + fp)
    recall = tp / n_gt if n_gt else np.zeros_like(tp)
    return precision, recall, n_gt


def ap_from_curve(precision, recall, method: str = "101"):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    if precision.size == 0:
        return 0.0
    # monotone envelope: precision at r = max precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if method == "101":
        # tolerance keeps e.g. recall 7/10 from falling just below the 0.70 sample point
        thresholds = np.linspace(0.0, 1.0, 101) - 1e-12
        idx = np.searchsorted(recall, thresholds, side="left")
        vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(vals.mean())
    if method == "exact":
        prev = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev) * env))
    raise ValueError(f"unknown AP method {method!r}")


def average_precision(preds_by_image: dict, gts_by_image: dict, iou_threshold: float = 0.5,
                      iou_kind: str = "mask", method: str = "101"):
    """101-point interpolated AP; ``None`` when there is no GT at all."""
    precision, recall, n_gt = pr_curve(preds_by_image, gts_by_image, iou_threshold, iou_kind)
    if n_gt == 0:
        return None
    return ap_from_curve(precision, recall, method)


def ap_summary(preds_by_image: dict, gts_by_image: dict, iou_kind: str = "mask"):
    """(AP, AP50, AP75). The headline AP is the IoU-0.5 value."""
    ap50 = average_precision(preds_by_image, gts_by_image, 0.5, iou_kind)
    ap75 = average_precision(preds_by_image, gts_by_image, 0.75, iou_kind)
    return ap50, ap50, ap75


def coco_ap(preds_by_image: dict, gts_by_image: dict, iou_kind: str = "mask"):
    """Mean AP over IoU 0.50:0.05:0.95."""
    vals = [average_precision(preds_by_image, gts_by_image, t, iou_kind) for t in np.arange(0.5, 0.951, 0.05)]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


# --- forged area -----------------------------------------------------------------

def forged_percentage(image_masks, height: int, width: int):
    """Percentage of the image covered by the union of the masks, plus the
    percentage of each individual mask."""
    if height * width <= 0:
        raise ValueError("zero-area image")
    union = np.zeros((height, width), dtype=bool)
    per_region = []
    for m in image_masks:
        m = np.asarray(m).astype(bool)
        if m.shape != (height, width):
            raise ValueError(f"mask shape {m.shape} != image shape {(height, width)}")
        union |= m
        per_region.append(100.0 * m.sum() / (height * width))
    return 100.0 * union.sum() / (height * width), per_region


# --- report -----------------------------------------------------------------------

@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    ap: float | None
    ap50: float | None
    ap75: float | None
    forged_percentage: float | None
    matching_iou: float
    tp: int
    fp: int
    fn: int
    n_images: int = 0
    n_gt: int = 0
    ap_coco: float | None = None
    per_image_forged: dict = field(default_factory=dict)

    CSV_COLUMNS = (
        ("F1-Score", "f1"), ("Precision", "precision"), ("Recall", "recall"),
        ("Avg. Precision", "ap"), ("AP0.5", "ap50"), ("AP0.75", "ap75"),
        ("Forged %", "forged_percentage"), ("TP", "tp"), ("FP", "fp"), ("FN", "fn"),
        ("Matching IoU", "matching_iou"),
    )

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([name for name, _ in self.CSV_COLUMNS])
        w.writerow(["" if getattr(self, attr) is None else getattr(self, attr) for _, attr in self.CSV_COLUMNS])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "metrics") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.csv").write_text(self.to_csv())


def evaluate(preds: dict, gts: dict, matching_iou: float = 0.5, iou_kind: str = "mask",
             with_coco: bool = False) -> MetricsReport:
    """``preds`` / ``gts`` map image id -> ImageRecord (or instance list)."""
    missing_p = sorted(set(gts) - set(preds))
    missing_g = sorted(set(preds) - set(gts))
    if missing_p or missing_g:
        raise EvaluationError(f"image ids differ; no predictions for {missing_p}, no ground truth for {missing_g}")
    p_inst = {k: _instances(v) for k, v in preds.items()}
    g_inst = {k: _instances(v) for k, v in gts.items()}
    tp = fp = fn = 0
    per_image = {}
    for image_id in sorted(gts):
        a, b, c, _ = match_detections(p_inst[image_id], g_inst[image_id], matching_iou, iou_kind)
        tp, fp, fn = tp + a, fp + b, fn + c
        rec = preds[image_id]
        if isinstance(rec, ImageRecord) and iou_kind == "mask" and rec.height * rec.width > 0:
            per_image[image_id] = forged_percentage([i.mask for i in rec.instances], rec.height, rec.width)[0]
    p, r, f1 = precision_recall_f1(tp, fp, fn)
    ap, ap50, ap75 = ap_summary(p_inst, g_inst, iou_kind)
    return MetricsReport(
        precision=p, recall=r, f1=f1, ap=ap, ap50=ap50, ap75=ap75,
        forged_percentage=float(np.mean(list(per_image.values()))) if per_image else None,
        matching_iou=matching_iou, tp=tp, fp=fp, fn=fn,
        n_images=len(gts), n_gt=sum(len(v) for v in g_inst.values()),
        ap_coco=coco_ap(p_inst, g_inst, iou_kind) if with_coco else None,
        per_image_forged=per_image,
    )


def _instances(v):
    return v.instances if isinstance(v, ImageRecord) else list(v)


def mean_reports(reports) -> dict:
    """Arithmetic mean of every numeric field, skipping undefined (None) values."""
    keys = ("precision", "recall", "f1", "ap", "ap50", "ap75", "forged_percentage")
    out = {}
    for k in keys:
        vals = [getattr(r, k) if isinstance(r, MetricsReport) else r[k] for r in reports]
        vals = [v for v in vals if v is not None]
        out[k] = float(sum(vals) / len(vals)) if vals else None
    return out


# --- RLE and file formats -----------------------------------------------------------

def rle_encode(mask) -> dict:
    flat = np.asarray(mask).astype(bool).reshape(-1)
    h, w = np.asarray(mask).shape
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return {"size": [int(h), int(w)], "counts": [int(r) for r in runs]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise EvaluationError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    values = np.arange(len(counts)) % 2
    return np.repeat(values, counts).astype(np.uint8).reshape(h, w)


PREDICTIONS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["image_id", "detections"],
        "properties": {
            "image_id": {"type": "string"},
            "height": {"type": "integer", "minimum": 0},
            "width": {"type": "integer", "minimum": 0},
            "forged_percentage": {"type": "number", "minimum": 0, "maximum": 100},
            "detections": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["box", "score"],
                    "properties": {
                        "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                        "score": {"type": "number", "minimum": 0, "maximum": 1},
                        "class_id": {"type": "integer", "minimum": 1},
                        "mask": {
                            "type": "object",
                            "required": ["size", "counts"],
                            "properties": {
                                "size": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                                "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                            },
                        },
                        "mask_png_path": {"type": "string"},
                    },
                },
            },
        },
    },
}


class SchemaError(EvaluationError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def validate_predictions(doc) -> None:
    try:
        jsonschema.validate(doc, PREDICTIONS_SCHEMA)
    except jsonschema.ValidationError as err:
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise SchemaError(path, err.message) from None


def predictions_to_json(records) -> list:
    out = []
    for rec in records:
        dets = []
        for inst in rec.instances:
            d = {"box": [float(v) for v in inst.box], "score": float(inst.score), "class_id": int(inst.class_id)}
            if inst.mask is not None:
                d["mask"] = rle_encode(inst.mask)
            dets.append(d)
        fp = forged_percentage([i.mask for i in rec.instances if i.mask is not None], rec.height, rec.width)[0] \
            if rec.height * rec.width else 0.0
        out.append({"image_id": rec.image_id, "height": rec.height, "width": rec.width,
                    "forged_percentage": fp, "detections": dets})
    return out


def read_predictions(doc, base_dir=None) -> dict:
    """Parse (and schema-check) a predictions document into ImageRecords."""
    if isinstance(doc, (str, Path)):
        path = Path(doc)
        base_dir = base_dir or path.parent
        doc = json.loads(path.read_text())
    validate_predictions(doc)
    out = {}
    for i, item in enumerate(doc):
        h, w = item.get("height", 0), item.get("width", 0)
        insts = []
        for j, d in enumerate(item["detections"]):
            if "mask" in d:
                mask = rle_decode(d["mask"])
            elif "mask_png_path" in d:
                mask = load_mask_png(Path(base_dir or ".") / d["mask_png_path"])
            else:
                mask = None
            if mask is not None and h and w and mask.shape != (h, w):
                raise SchemaError(f"$[{i}].detections[{j}].mask", f"size {mask.shape} != image {(h, w)}")
            insts.append(Instance(tuple(d["box"]), mask, float(d["score"]), int(d.get("class_id", 1))))
        if item["image_id"] in out:
            raise SchemaError(f"$[{i}].image_id", f"duplicate id {item['image_id']!r}")
        out[item["image_id"]] = ImageRecord(item["image_id"], h, w, insts)
    return out


def ground_truth_from_manifest(manifest, split=None) -> dict:
    from .dataset import load_manifest
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    root = Path(manifest.get("_root", "."))
    out = {}
    for e in manifest["entries"]:
        if split is not None and e.get("split") != split:
            continue
        masks = [load_mask_png(root / m) for m in e["masks"]]
        out[e["id"]] = ImageRecord(e["id"], e["height"], e["width"],
                                   [Instance(mask_to_box(m), m, 1.0) for m in masks])
    return out


def ground_truth_from_samples(samples) -> dict:
    return {s.source_id: ImageRecord(s.source_id, s.height, s.width,
                                     [Instance(mask_to_box(m), np.asarray(m), 1.0) for m in s.masks])
            for s in samples}
