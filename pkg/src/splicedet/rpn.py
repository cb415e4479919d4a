"""Anchors, anchor/ground-truth matching, box deltas, NMS and proposals.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates; a box's
width is ``x2 - x1`` (no +1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
# exp() guard for tw/th, as in the Detectron family
DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass
class AnchorSet:
    boxes: torch.Tensor  # (A, 4)
    level_of: torch.Tensor  # (A,) pyramid level index (0 = first level given)
    stride_of: torch.Tensor  # (A,)

    def __len__(self):
        return self.boxes.shape[0]


@dataclass
class AnchorLabels:
    label: torch.Tensor  # (A,) POSITIVE / NEGATIVE / IGNORE
    matched_gt: torch.Tensor  # (A,) gt index, -1 where unmatched

    @property
    def positives(self):
        return torch.nonzero(self.label == POSITIVE).flatten()

    @property
    def negatives(self):
        return torch.nonzero(self.label == NEGATIVE).flatten()


def generate_anchors(pyramid_shapes, scales, ratios, units: str = "stride", dtype=torch.float32) -> AnchorSet:
    """Tile anchors over every level.

    ``pyramid_shapes`` is a list of ``(H, W, stride)``. At each cell of level
    ``l`` there is one anchor per ratio, of side ``scales[l] * stride``
    (``units="pixels"`` uses ``scales[l]`` directly), height/width equal to
    the ratio, centred at ``((x + 0.5) * stride, (y + 0.5) * stride)``.
    Ordering: level-major, then row-major cells, ratio fastest.
    """
    if len(scales) != len(pyramid_shapes):
        raise ValueError(f"{len(scales)} scales for {len(pyramid_shapes)} pyramid levels")
    if len(ratios) == 0:
        raise ValueError("need at least one aspect ratio")
    boxes, levels, strides = [], [], []
    r = torch.tensor(ratios, dtype=torch.float64)
    for lvl, ((h, w, stride), scale) in enumerate(zip(pyramid_shapes, scales)):
        side = scale * stride if units == "stride" else float(scale)
        hs = side * torch.sqrt(r)
        ws = side / torch.sqrt(r)
        cy = (torch.arange(h, dtype=torch.float64) + 0.5) * stride
        cx = (torch.arange(w, dtype=torch.float64) + 0.5) * stride
        cy, cx = torch.meshgrid(cy, cx, indexing="ij")
        cx = cx.reshape(-1, 1)
        cy = cy.reshape(-1, 1)
        b = torch.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], dim=-1).reshape(-1, 4)
        boxes.append(b)
        levels.append(torch.full((b.shape[0],), lvl, dtype=torch.long))
        strides.append(torch.full((b.shape[0],), stride, dtype=torch.long))
    return AnchorSet(torch.cat(boxes).to(dtype), torch.cat(levels), torch.cat(strides))


def anchor_count(pyramid_shapes, n_ratios: int) -> int:
    return n_ratios * sum(h * w for h, w, _ in pyramid_shapes)


# --- overlap ----------------------------------------------------------------

def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou(a, b) -> torch.Tensor:
    """Pairwise IoU matrix (N, M); 0 wherever either box is degenerate."""
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1, 4)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1, 4)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))
    degenerate = (box_area(a)[:, None] <= 0) | (box_area(b)[None, :] <= 0)
    return out.masked_fill(degenerate, 0.0)


def iou(a, b) -> float:
    return float(box_iou(a, b)[0, 0])


# --- matching and sampling --------------------------------------------------

def match_anchors(anchors, gt_boxes, pos_iou: float = 0.7, neg_iou: float = 0.3) -> AnchorLabels:
    """Positive when max IoU >= pos_iou or the anchor is some GT's best anchor
    (lowest index on ties, overlap > 0); negative when max IoU < neg_iou;
    otherwise ignored."""
    if pos_iou <= neg_iou:
        raise ValueError("pos_iou must exceed neg_iou")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else torch.as_tensor(anchors)
    boxes = boxes.reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0:
        raise ValueError("no anchors to match")
    gt = torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4)
    label = torch.full((n,), NEGATIVE, dtype=torch.long)
    matched = torch.full((n,), -1, dtype=torch.long)
    if gt.shape[0] == 0:
        return AnchorLabels(label, matched)
    overlaps = box_iou(boxes, gt)  # (A, G)
    max_iou, argmax_gt = overlaps.max(dim=1)
    label[(max_iou >= neg_iou)] = IGNORE
    label[max_iou >= pos_iou] = POSITIVE
    best_iou, best_anchor = overlaps.max(dim=0)  # first maximal index per GT
    best_anchor = best_anchor[best_iou > 0]
    label[best_anchor] = POSITIVE
    matched[label == POSITIVE] = argmax_gt[label == POSITIVE]
    return AnchorLabels(label, matched)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_anchor_minibatch(labels: AnchorLabels, batch: int = 256, pos_fraction: float = 0.5, seed=0) -> torch.Tensor:
    """Indices of at most ``batch`` anchors: up to ``batch * pos_fraction``
    positives, the rest negatives. Positives come first in the result."""
    if not 0 < pos_fraction <= 1:
        raise ValueError("pos_fraction must lie in (0, 1]")
    rng = _rng(seed)
    pos = labels.positives.numpy()
    neg = labels.negatives.numpy()
    n_pos = min(len(pos), int(batch * pos_fraction))
    pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    n_neg = min(len(neg), batch - n_pos)
    neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    return torch.as_tensor(np.concatenate([pos, neg]).astype(np.int64))


# --- box deltas -------------------------------------------------------------

def encode_box_deltas(anchors, targets) -> torch.Tensor:
    """(tx, ty, tw, th) taking each anchor onto its target box."""
    a = torch.as_tensor(anchors).reshape(-1, 4)
    t = torch.as_tensor(targets, dtype=a.dtype).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("cannot encode against a zero-width or zero-height anchor")
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    tcx, tcy = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    return torch.stack([(tcx - acx) / aw, (tcy - acy) / ah, torch.log(tw / aw), torch.log(th / ah)], dim=1)


def decode_box_deltas(anchors, deltas, image_size=None) -> torch.Tensor:
    """Inverse of :func:`encode_box_deltas`; clips to ``(H, W)`` when given."""
    a = torch.as_tensor(anchors).reshape(-1, 4)
    d = torch.as_tensor(deltas, dtype=a.dtype).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("cannot decode against a zero-width or zero-height anchor")
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    cx, cy = acx + d[:, 0] * aw, acy + d[:, 1] * ah
    w = aw * torch.exp(d[:, 2].clamp(max=DELTA_CLAMP))
    h = ah * torch.exp(d[:, 3].clamp(max=DELTA_CLAMP))
    boxes = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)
    if image_size is not None:
        boxes = clip_boxes(boxes, image_size)
    return boxes


def clip_boxes(boxes: torch.Tensor, image_size) -> torch.Tensor:
    h, w = image_size
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


# --- suppression and proposals ----------------------------------------------

def score_order(scores: torch.Tensor) -> torch.Tensor:
    """Descending by score, ties broken by lower index."""
    return torch.sort(-torch.as_tensor(scores, dtype=torch.float64), stable=True).indices


def nms(boxes, scores, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS; kept indices in score-descending order."""
    boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
    scores = torch.as_tensor(scores, dtype=torch.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores differ in length")
    order = score_order(scores)
    if order.numel() == 0:
        return order
    overlaps = box_iou(boxes[order], boxes[order])
    n = order.numel()
    suppressed = np.zeros(n, dtype=bool)
    over = (overlaps > iou_threshold).numpy()
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= over[i]
    return order[torch.as_tensor(keep, dtype=torch.long)]


def propose(objectness, deltas, anchors, image_size, pre_nms: int = 2000, post_nms: int = 512,
            nms_iou: float = 0.7, delta_std=None, min_size: float = 0.0):
    """Decode, clip, drop degenerate boxes, keep the top ``pre_nms`` by
    objectness, suppress, and return at most ``post_nms`` (boxes, scores)."""
    boxes_a = anchors.boxes if isinstance(anchors, AnchorSet) else torch.as_tensor(anchors)
    scores = torch.as_tensor(objectness).reshape(-1).detach()
    d = torch.as_tensor(deltas).reshape(-1, 4).detach()
    if delta_std is not None:
        d = d * torch.as_tensor(delta_std, dtype=d.dtype)
    order = score_order(scores)[:pre_nms]
    boxes = decode_box_deltas(boxes_a[order].to(d.dtype), d[order], image_size)
    s = scores[order]
    ok = ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)
    boxes, s = boxes[ok], s[ok]
    keep = nms(boxes, s, nms_iou)[:post_nms]
    return boxes[keep], s[keep]


class RPNHead(nn.Module):
    """Shared 3x3 conv, then per-anchor 2-way objectness logits and 4 deltas."""

    def __init__(self, in_channels: int = 256, conv_channels: int = 512, anchors_per_location: int = 3):
        super().__init__()
        self.a = anchors_per_location
        self.conv = nn.Conv2d(in_channels, conv_channels, 3, padding=1)
        self.cls = nn.Conv2d(conv_channels, 2 * anchors_per_location, 1)
        self.bbox = nn.Conv2d(conv_channels, 4 * anchors_per_location, 1)
        for m in (self.conv, self.cls, self.bbox):
            nn.init.normal_(m.weight, 0.0, 0.01)
            nn.init.zeros_(m.bias)

    def forward(self, levels):
        """Returns logits (A_total, 2) and deltas (A_total, 4) for one image,
        ordered like :func:`generate_anchors`."""
        logits, deltas = [], []
        for x in levels:
            h = F.relu(self.conv(x))
            c = self.cls(h)[0].permute(1, 2, 0).reshape(-1, 2)
            b = self.bbox(h)[0].permute(1, 2, 0).reshape(-1, 4)
            logits.append(c)
            deltas.append(b)
        return torch.cat(logits), torch.cat(deltas)
