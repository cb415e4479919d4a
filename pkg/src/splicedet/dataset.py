"""MISD-style data: VIA polygon annotations, ground-truth masks, splits and
synthetic multi-splice fixtures."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLICED = "spliced"
AUTHENTIC_CATEGORIES = (
    "animal", "architecture", "art", "character", "indoor",
    "nature", "plant", "scene", "texture",
)
# CASIA 1.0 file-name codes, e.g. Au_ani_0001.jpg
CASIA_CODES = {
    "ani": "animal", "arc": "architecture", "art": "art", "cha": "character",
    "ind": "indoor", "nat": "nature", "pla": "plant", "sec": "scene", "txt": "texture",
}
MIN_SPLICES, MAX_SPLICES = 3, 7


class AnnotationError(ValueError):
    """Malformed annotation document. ``offset`` is a byte offset into the input."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class DegeneratePolygonError(ValueError):
    pass


@dataclass
class PolygonRegion:
    vertices: list  # [(x, y), ...] in pixel coordinates
    class_label: str = SPLICED

    @property
    def xs(self) -> np.ndarray:
        return np.array([v[0] for v in self.vertices], dtype=np.float64)

    @property
    def ys(self) -> np.ndarray:
        return np.array([v[1] for v in self.vertices], dtype=np.float64)

    @property
    def is_simple(self) -> bool:
        return len(self.vertices) >= 3 and not _self_intersects(self.vertices)

    def bbox(self):
        xs, ys = self.xs, self.ys
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())


@dataclass
class AnnotatedSample:
    image: np.ndarray  # H x W x 3 uint8
    regions: list = field(default_factory=list)
    masks: list = field(default_factory=list)  # H x W uint8 {0, 1}, one per region
    source_id: str = ""
    category: str | None = None

    def __post_init__(self):
        if len(self.masks) != len(self.regions):
            raise ValueError("one mask per region required")

    @property
    def is_spliced(self) -> bool:
        return len(self.regions) > 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def boxes(self) -> np.ndarray:
        """Tight pixel boxes (x1, y1, x2, y2) around each mask; x2/y2 exclusive."""
        return np.array([mask_to_box(m) for m in self.masks], dtype=np.float64).reshape(-1, 4)


@dataclass
class DatasetSplit:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int

    def assignment(self) -> dict:
        out = {}
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            for i in ids:
                out[i] = name
        return out


@dataclass
class RejectedRegion:
    filename: str
    index: int
    shape: str
    reason: str


@dataclass
class ParsedAnnotations:
    regions: dict  # filename -> [PolygonRegion]
    rejected: list  # [RejectedRegion]
    file_attributes: dict = field(default_factory=dict)


# --- annotations ----------------------------------------------------------

def parse_via_annotations(document: str | bytes) -> ParsedAnnotations:
    """Parse a VGG Image Annotator project (2.x, or the bare 1.x export).

    Non-polygon shapes are dropped one region at a time and reported in
    ``rejected``; an image with no regions maps to an empty list.
    """
    if isinstance(document, bytes):
        raw = document
        document = document.decode("utf-8")
    else:
        raw = None
    try:
        data = json.loads(document)
    except json.JSONDecodeError as err:
        offset = len((raw.decode("utf-8") if raw is not None else document)[: err.pos].encode("utf-8"))
        raise AnnotationError(f"invalid JSON: {err.msg}", offset) from None
    if not isinstance(data, dict):
        raise AnnotationError("top level must be an object", 0)
    metadata = data.get("_via_img_metadata", data)
    if not isinstance(metadata, dict):
        raise AnnotationError("_via_img_metadata must be an object")

    regions, rejected, attrs = {}, [], {}
    for key, entry in metadata.items():
        if not isinstance(entry, dict) or "filename" not in entry:
            raise AnnotationError(f"entry {key!r} has no filename")
        filename = entry["filename"]
        entry_regions = entry.get("regions") or []
        if isinstance(entry_regions, dict):  # VIA 1.x keyed regions
            entry_regions = [entry_regions[k] for k in sorted(entry_regions, key=_natural_key)]
        polys = []
        for idx, region in enumerate(entry_regions):
            shape = (region or {}).get("shape_attributes") or {}
            name = shape.get("name", "")
            if name not in ("polygon", "polyline"):
                reason = f"unsupported shape {name!r}"
            else:
                xs, ys = shape.get("all_points_x"), shape.get("all_points_y")
                if not isinstance(xs, list) or not isinstance(ys, list) or len(xs) != len(ys):
                    reason = "all_points_x/all_points_y missing or of unequal length"
                elif len(xs) < 3:
                    reason = f"polygon has {len(xs)} vertices"
                else:
                    label = (region.get("region_attributes") or {}).get("class", SPLICED) or SPLICED
                    polys.append(PolygonRegion([(float(x), float(y)) for x, y in zip(xs, ys)], str(label)))
                    continue
            log.warning("%s region %d rejected: %s", filename, idx, reason)
            rejected.append(RejectedRegion(filename, idx, name, reason))
        regions[filename] = polys
        attrs[filename] = entry.get("file_attributes") or {}
    return ParsedAnnotations(regions, rejected, attrs)


def _natural_key(s):
    return (0, int(s)) if str(s).isdigit() else (1, str(s))


def to_via_document(regions_by_file: dict, sizes: dict | None = None, file_attributes: dict | None = None) -> str:
    """Serialize regions back into a VIA 2.x project document."""
    metadata = {}
    for filename, regions in regions_by_file.items():
        size = (sizes or {}).get(filename, -1)
        metadata[f"{filename}{size}"] = {
            "filename": filename,
            "size": size,
            "regions": [
                {
                    "shape_attributes": {
                        "name": "polygon",
                        "all_points_x": [_num(v[0]) for v in r.vertices],
                        "all_points_y": [_num(v[1]) for v in r.vertices],
                    },
                    "region_attributes": {"class": r.class_label},
                }
                for r in regions
            ],
            "file_attributes": (file_attributes or {}).get(filename, {}),
        }
    doc = {
        "_via_settings": {},
        "_via_img_metadata": metadata,
        "_via_attributes": {"region": {}, "file": {}},
    }
    return json.dumps(doc, indent=1)


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


# --- masks ----------------------------------------------------------------

def rasterize_polygon(region: PolygonRegion, height: int, width: int) -> np.ndarray:
    """Binary mask of ``region``: pixel (x, y) is set iff its centre
    (x + 0.5, y + 0.5) is inside the polygon under the even-odd rule.

    Crossings use the half-open convention of the classic PNPOLY test, so a
    centre lying exactly on a left edge is inside and on a right edge outside.
    """
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    if len(region.vertices) < 3:
        raise DegeneratePolygonError(f"polygon needs >= 3 vertices, got {len(region.vertices)}")
    xs = np.clip(region.xs, 0.0, float(width))
    ys = np.clip(region.ys, 0.0, float(height))
    xj, yj = np.roll(xs, 1), np.roll(ys, 1)

    mask = np.zeros((height, width), dtype=np.uint8)
    centers_x = np.arange(width) + 0.5
    y_lo = max(int(math.floor(ys.min())) - 1, 0)
    y_hi = min(int(math.ceil(ys.max())) + 1, height)
    for y in range(y_lo, y_hi):
        py = y + 0.5
        crossing = (ys > py) != (yj > py)
        if not crossing.any():
            continue
        xi_, yi_, xj_, yj_ = xs[crossing], ys[crossing], xj[crossing], yj[crossing]
        x_int = (xj_ - xi_) * (py - yi_) / (yj_ - yi_) + xi_
        # inside iff an odd number of crossings lie strictly right of the centre
        right = (centers_x[:, None] < x_int[None, :]).sum(axis=1)
        mask[y] = (right % 2).astype(np.uint8)
    return mask


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(p1, p2, p3), orient(p1, p2, p4), orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, p3)) or (o2 == 0 and on_seg(p1, p2, p4))
            or (o3 == 0 and on_seg(p3, p4, p1)) or (o4 == 0 and on_seg(p3, p4, p2)))


def _self_intersects(vertices) -> bool:
    n = len(vertices)
    edges = [(vertices[i], vertices[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # neighbours share a vertex
            if _segments_cross(*edges[i], *edges[j]):
                return True
    return False


def mask_to_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


# --- geometry transforms --------------------------------------------------

@dataclass
class ResizeInfo:
    scale: float
    pad_offsets: tuple  # (top, left)
    original_shape: tuple  # (H, W)
    target: int

    def forward_boxes(self, boxes) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * self.scale
        top, left = self.pad_offsets
        return b + np.array([left, top, left, top], dtype=np.float64)

    def inverse_boxes(self, boxes) -> np.ndarray:
        top, left = self.pad_offsets
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) - np.array([left, top, left, top])
        return b / self.scale

    def inverse_mask(self, mask: np.ndarray) -> np.ndarray:
        """Crop the padding and resample back to the original size (nearest)."""
        h, w = self.original_shape
        top, left = self.pad_offsets
        rh, rw = _resized_hw(h, w, self.scale)
        inner = np.asarray(mask)[top: top + rh, left: left + rw]
        return _nearest(inner, h, w)


def _resized_hw(h, w, scale):
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def _nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64), in_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64), in_w - 1)
    return arr[rows][:, cols]


def resize_and_pad(image: np.ndarray, masks=(), target: int = 512):
    """Scale the longest side to ``target`` and zero-pad to a centred square.

    Returns ``(image, masks, scale, (top, left))``; the image is resampled
    bilinearly, masks by nearest neighbour.
    """
    if target <= 0:
        raise ValueError("target must be positive")
    image = np.asarray(image)
    if image.size == 0 or image.ndim < 2:
        raise ValueError("empty image")
    h, w = image.shape[:2]
    scale = target / max(h, w)
    rh, rw = _resized_hw(h, w, scale)
    if (rh, rw) == (h, w):
        resized = image.copy()
    else:
        resized = np.asarray(Image.fromarray(image).resize((rw, rh), Image.BILINEAR))
    top, left = (target - rh) // 2, (target - rw) // 2
    out = np.zeros((target, target) + image.shape[2:], dtype=image.dtype)
    out[top: top + rh, left: left + rw] = resized
    out_masks = []
    for m in masks:
        pm = np.zeros((target, target), dtype=np.uint8)
        pm[top: top + rh, left: left + rw] = _nearest(np.asarray(m, dtype=np.uint8), rh, rw)
        out_masks.append(pm)
    return out, out_masks, scale, (top, left)


def prepare_sample(sample: AnnotatedSample, target: int):
    """Resize a sample for the network; returns (image, masks, ResizeInfo)."""
    img, masks, scale, pad = resize_and_pad(sample.image, sample.masks, target)
    return img, masks, ResizeInfo(scale, pad, (sample.height, sample.width), target)


# --- splits and statistics ------------------------------------------------

MISD_SPLIT = (734, 92, 92)


def split_dataset(ids, counts, seed: int) -> DatasetSplit:
    ids = list(ids)
    n_train, n_val, n_test = counts
    if min(counts) < 0:
        raise ValueError("split counts must be non-negative")
    if n_train + n_val + n_test > len(ids):
        raise ValueError(f"requested {sum(counts)} ids but only {len(ids)} available")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train:n_train + n_val],
        test_ids=shuffled[n_train + n_val:n_train + n_val + n_test],
        seed=seed,
    )


def proportional_counts(n: int, ratio=MISD_SPLIT) -> tuple:
    """Scale the 734/92/92 proportions to ``n`` samples (remainder to train)."""
    total = sum(ratio)
    val = int(round(n * ratio[1] / total))
    test = int(round(n * ratio[2] / total))
    return (n - val - test, val, test)


def dataset_stats(samples) -> dict:
    """Dataset composition counts. Accepts AnnotatedSamples or manifest entries."""
    by_category = Counter()
    authentic = spliced = 0
    regions_per_spliced = Counter()
    for s in samples:
        if isinstance(s, AnnotatedSample):
            n_regions, category = len(s.regions), s.category
        else:
            n_regions, category = len(s.get("masks", [])), s.get("category")
        if n_regions:
            spliced += 1
            regions_per_spliced[n_regions] += 1
        else:
            authentic += 1
            by_category[category or "unknown"] += 1
    return {
        "total": authentic + spliced,
        "authentic": authentic,
        "spliced": spliced,
        "authentic_by_category": dict(sorted(by_category.items())),
        "regions_per_spliced": dict(sorted(regions_per_spliced.items())),
    }


def category_from_filename(filename: str) -> str | None:
    parts = Path(filename).stem.lower().split("_")
    for p in parts:
        if p in CASIA_CODES:
            return CASIA_CODES[p]
    return None


# --- synthetic fixtures ---------------------------------------------------

def _background(rng, h, w) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for c in range(3):
        base = rng.uniform(70, 150)
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2) * 2 * np.pi / max(h, w)
            phase = rng.uniform(0, 2 * np.pi)
            img[..., c] += rng.uniform(10, 30) * np.sin(fx * xx + fy * yy + phase)
        img[..., c] += base
    img += rng.normal(0.0, 2.0, size=(h, w, 1))
    return img


def _donor(rng, h, w) -> np.ndarray:
    # high-contrast checker/stripe texture with its own colour and strong noise
    yy, xx = np.mgrid[0:h, 0:w]
    period = int(rng.integers(3, 6))
    if rng.random() < 0.5:
        pattern = ((xx // period + yy // period) % 2).astype(np.float64)
    else:
        pattern = ((xx + yy) // period % 2).astype(np.float64)
    color_a = rng.uniform(0, 255, size=3)
    color_b = rng.uniform(0, 255, size=3)
    img = pattern[..., None] * color_a + (1 - pattern[..., None]) * color_b
    img += rng.normal(0.0, 12.0, size=(h, w, 3))
    return img


def _random_polygon(rng, cx, cy, radius):
    kind = rng.integers(0, 3)
    if kind == 0:  # rectangle
        hw, hh = radius * rng.uniform(0.6, 1.0), radius * rng.uniform(0.6, 1.0)
        return [(cx - hw, cy - hh), (cx + hw, cy - hh), (cx + hw, cy + hh), (cx - hw, cy + hh)]
    if kind == 1:  # triangle
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        angles = angles[0] + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
        radii = np.full(3, radius)
    else:  # star-shaped polygon, simple by construction (angle-sorted)
        k = int(rng.integers(5, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = radius * rng.uniform(0.65, 1.0, size=k)
    return [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a, r in zip(angles, radii)]


def make_synthetic_fixture(n_images: int, image_size=(256, 384), splice_range=(MIN_SPLICES, MAX_SPLICES),
                           seed: int = 0, radius_range=None, authentic_fraction: float = 0.0):
    """Textured backgrounds with ``k`` pasted polygonal patches each,
    ``k`` uniform in ``splice_range``. Patches never overlap, so every mask is
    exactly the rasterized polygon. Deterministic in ``seed``."""
    lo, hi = splice_range
    if not (1 <= lo <= hi <= 20):
        raise ValueError("splice_range must satisfy 1 <= min <= max <= 20")
    h, w = image_size
    if radius_range is None:
        r_max = min(h, w) / 8.0
        radius_range = (max(3.0, r_max * 0.6), r_max)
    r_lo, r_hi = radius_range
    # every patch needs a (2 r_hi)^2 cell; fail early if hi patches cannot fit
    if hi * (2 * r_hi + 2) ** 2 > 0.6 * h * w or 2 * r_hi + 2 > min(h, w):
        raise ValueError(f"image {h}x{w} too small for {hi} patches of radius {r_hi:.1f}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_images):
        img = _background(rng, h, w)
        authentic = rng.random() < authentic_fraction
        k = 0 if authentic else int(rng.integers(lo, hi + 1))
        regions, masks, placed = [], [], []
        occupied = np.zeros((h, w), dtype=bool)
        attempts = 0
        while len(regions) < k:
            attempts += 1
            if attempts > 2000:
                raise ValueError(f"could not place {k} patches on a {h}x{w} image")
            radius = rng.uniform(r_lo, r_hi)
            cx = rng.uniform(radius + 1, w - radius - 1)
            cy = rng.uniform(radius + 1, h - radius - 1)
            if any(math.hypot(cx - px, cy - py) < radius + pr + 2 for px, py, pr in placed):
                continue
            region = PolygonRegion(_random_polygon(rng, cx, cy, radius))
            mask = rasterize_polygon(region, h, w)
            if mask.sum() < 4 or (occupied & (mask > 0)).any():
                continue
            donor = _donor(rng, h, w)
            img[mask > 0] = donor[mask > 0]
            occupied |= mask > 0
            placed.append((cx, cy, radius))
            regions.append(region)
            masks.append(mask)
        image = np.clip(np.round(img), 0, 255).astype(np.uint8)
        samples.append(AnnotatedSample(
            image=image, regions=regions, masks=masks,
            source_id=f"synth_{seed}_{i:04d}",
            category=None if regions else AUTHENTIC_CATEGORIES[int(rng.integers(0, 9))],
        ))
    return samples


def write_fixture(samples, out_dir) -> Path:
    """Write fixture images (PNG) and one VIA project document; returns its path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    regions, sizes, attrs = {}, {}, {}
    for s in samples:
        name = f"{s.source_id}.png"
        path = out / "images" / name
        Image.fromarray(s.image).save(path)
        regions[name] = s.regions
        sizes[name] = path.stat().st_size
        attrs[name] = {"category": s.category} if s.category else {}
    via = out / "via_project.json"
    via.write_text(to_via_document(regions, sizes, attrs))
    return via


# --- manifest -------------------------------------------------------------

MANIFEST_VERSION = 1


def build_dataset(images_dir, annotation_path, out_dir, seed: int = 0, counts=None,
                  use_authentic: bool = True) -> dict:
    """Rasterize every annotated region to PNG masks and write a manifest.

    Masks go to ``out_dir/masks/<stem>_r<k>.png`` (0/255) plus
    ``<stem>_union.png`` per image.
    """
    images_dir, out = Path(images_dir), Path(out_dir)
    parsed = parse_via_annotations(Path(annotation_path).read_bytes())
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for filename in sorted(parsed.regions):
        image_path = images_dir / filename
        if not image_path.exists():
            raise FileNotFoundError(image_path)
        regions = parsed.regions[filename]
        if not regions and not use_authentic:
            continue
        with Image.open(image_path) as im:
            w, h = im.size
        stem = Path(filename).stem
        mask_paths, union = [], np.zeros((h, w), dtype=np.uint8)
        for k, region in enumerate(regions):
            m = rasterize_polygon(region, h, w)
            p = out / "masks" / f"{stem}_r{k}.png"
            save_mask_png(m, p)
            mask_paths.append(str(p.relative_to(out)))
            union |= m
        union_path = out / "masks" / f"{stem}_union.png"
        save_mask_png(union, union_path)
        category = parsed.file_attributes.get(filename, {}).get("category") or category_from_filename(filename)
        entries.append({
            "id": stem,
            "image": str(image_path.resolve()),
            "annotation": str(Path(annotation_path).resolve()),
            "height": h,
            "width": w,
            "category": category,
            "regions": [r.vertices for r in regions],
            "masks": mask_paths,
            "union_mask": str(union_path.relative_to(out)),
            "split": None,
        })
    ids = [e["id"] for e in entries]
    if counts is None:
        counts = MISD_SPLIT if len(ids) == sum(MISD_SPLIT) else proportional_counts(len(ids))
    split = split_dataset(ids, counts, seed)
    assignment = split.assignment()
    for e in entries:
        e["split"] = assignment.get(e["id"])
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "split_counts": list(counts),
        "rejected_regions": [vars(r) for r in parsed.rejected],
        "entries": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    manifest["_root"] = str(Path(path).resolve().parent)
    return manifest


def validate_dataset(manifest_path) -> list:
    """Re-rasterize every region and compare with the stored PNGs.

    Returns a list of human-readable problems; empty means the dataset is
    consistent.
    """
    manifest = load_manifest(manifest_path)
    root = Path(manifest["_root"])
    problems = []
    for e in manifest["entries"]:
        h, w = e["height"], e["width"]
        if len(e["regions"]) != len(e["masks"]):
            problems.append(f"{e['id']}: {len(e['regions'])} regions but {len(e['masks'])} masks")
            continue
        union = np.zeros((h, w), dtype=np.uint8)
        for verts, mpath in zip(e["regions"], e["masks"]):
            expected = rasterize_polygon(PolygonRegion([tuple(v) for v in verts]), h, w)
            union |= expected
            p = root / mpath
            if not p.exists():
                problems.append(f"{mpath}: missing")
            elif not np.array_equal(load_mask_png(p), expected):
                problems.append(f"{mpath}: mask differs from its polygon")
        up = root / e["union_mask"]
        if not up.exists() or not np.array_equal(load_mask_png(up), union):
            problems.append(f"{e['union_mask']}: union mask mismatch")
    return problems


def load_samples(manifest, split=None) -> list:
    """Materialize AnnotatedSamples for manifest entries (optionally one split)."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    root = Path(manifest.get("_root", "."))
    samples = []
    for e in manifest["entries"]:
        if split is not None and e.get("split") != split:
            continue
        samples.append(sample_from_entry(e, root))
    return samples


def sample_from_entry(entry: dict, root) -> AnnotatedSample:
    regions = [PolygonRegion([tuple(v) for v in verts]) for verts in entry["regions"]]
    masks = [load_mask_png(Path(root) / m) for m in entry["masks"]]
    return AnnotatedSample(load_image(entry["image"]), regions, masks, entry["id"], entry.get("category"))
