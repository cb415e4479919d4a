"""ROIAlign, ROI sampling, the box and mask heads, and mask pasting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ConvBN
from .rpn import box_iou, encode_box_deltas, _rng

ROI_CHUNK = 64


def roi_align(features, boxes, output_size=(7, 7), stride: float = 1.0, sampling_ratio: int = 2) -> torch.Tensor:
    """Pool ``features`` (C, H, W) or (1, C, H, W) inside each box.

    Boxes are in image pixels and are divided by ``stride`` without rounding.
    Bin (i, j) averages ``sampling_ratio**2`` bilinear samples on a regular
    grid inside the bin. Feature cell (r, c) is centred at (c + 0.5, r + 0.5)
    in feature coordinates; interpolation treats everything outside the map
    as 0. Differentiable in both features and box coordinates.
    Returns (R, C, h, w).
    """
    if features.dim() == 4:
        if features.shape[0] != 1:
            raise ValueError("roi_align takes one image at a time")
        features = features[0]
    boxes = torch.as_tensor(boxes).reshape(-1, 4)
    oh, ow = (output_size, output_size) if isinstance(output_size, int) else output_size
    if oh < 1 or ow < 1 or sampling_ratio < 1:
        raise ValueError("output_size and sampling_ratio must be >= 1")
    if boxes.shape[0] and (((boxes[:, 2] - boxes[:, 0]) <= 0).any() or ((boxes[:, 3] - boxes[:, 1]) <= 0).any()):
        raise ValueError("degenerate box passed to roi_align")
    c = features.shape[0]
    if boxes.shape[0] == 0:
        return features.new_zeros((0, c, oh, ow))
    out = [_roi_align_chunk(features, boxes[i:i + ROI_CHUNK].to(features.dtype), oh, ow, stride, sampling_ratio)
           for i in range(0, boxes.shape[0], ROI_CHUNK)]
    return torch.cat(out)


def _sample_coords(lo, hi, n_bins, sr):
    # (R, n_bins * sr) continuous feature coordinates of the sample points
    bin_size = (hi - lo) / n_bins
    steps = (torch.arange(n_bins * sr, dtype=lo.dtype, device=lo.device) + 0.5) / sr
    return lo[:, None] + steps[None, :] * bin_size[:, None]


def _roi_align_chunk(feat, boxes, oh, ow, stride, sr):
    c, h, w = feat.shape
    scaled = boxes / stride
    # index space: cell k covers [k, k+1) so its centre sits at k + 0.5
    ys = _sample_coords(scaled[:, 1], scaled[:, 3], oh, sr) - 0.5  # (R, Sy)
    xs = _sample_coords(scaled[:, 0], scaled[:, 2], ow, sr) - 0.5  # (R, Sx)
    y0 = torch.floor(ys).detach()
    x0 = torch.floor(xs).detach()
    ly, lx = ys - y0, xs - x0
    y0, x0 = y0.long(), x0.long()
    flat = feat.reshape(c, h * w)
    r, sy, sx = ys.shape[0], ys.shape[1], xs.shape[1]
    acc = feat.new_zeros((r, c, sy, sx))
    for dy, wy in ((0, 1 - ly), (1, ly)):
        yi = y0 + dy
        vy = (yi >= 0) & (yi < h)
        for dx, wx in ((0, 1 - lx), (1, lx)):
            xi = x0 + dx
            vx = (xi >= 0) & (xi < w)
            idx = yi.clamp(0, h - 1)[:, :, None] * w + xi.clamp(0, w - 1)[:, None, :]  # (R, Sy, Sx)
            weight = (wy * vy)[:, :, None] * (wx * vx)[:, None, :]
            vals = flat[:, idx.reshape(-1)].reshape(c, r, sy, sx).permute(1, 0, 2, 3)
            acc = acc + vals * weight[:, None]
    return acc.reshape(r, c, oh, sr, ow, sr).mean(dim=(3, 5))


def roi_levels(boxes, canonical_size: float = 224.0, canonical_level: int = 4, min_level=2, max_level=5):
    """Pyramid level per box: floor(k0 + log2(sqrt(area) / canonical)), clamped."""
    wh = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp(min=1e-6)
    k = torch.floor(canonical_level + torch.log2(torch.sqrt(wh) / canonical_size) + 1e-6)
    return k.clamp(min_level, max_level).long()


def multilevel_roi_align(pyramid, boxes, output_size, sampling_ratio=2, canonical_size=224.0, canonical_level=4):
    levels = roi_levels(boxes, canonical_size, canonical_level)
    first = pyramid.levels["P2"]
    out = first.new_zeros((boxes.shape[0], first.shape[1]) + (
        (output_size, output_size) if isinstance(output_size, int) else tuple(output_size)))
    for k in range(2, 6):
        idx = torch.nonzero(levels == k).flatten()
        if idx.numel():
            out[idx] = roi_align(pyramid.levels[f"P{k}"], boxes[idx], output_size, 2 ** k, sampling_ratio)
    return out


# --- ROI sampling ------------------------------------------------------------

@dataclass
class RoiSample:
    proposal: tuple
    label: int  # class id, 0 = background
    matched_gt: int | None
    box_target: tuple | None
    mask_target: np.ndarray | None


@dataclass
class RoiSamples:
    """Batched form: foreground rows come first."""
    proposals: torch.Tensor  # (R, 4)
    labels: torch.Tensor  # (R,) long, 0 = background
    matched_gt: torch.Tensor  # (R,) long, -1 for background
    box_targets: torch.Tensor  # (F, 4) raw deltas for the F foreground rows
    mask_targets: torch.Tensor  # (F, m, m) binary float

    def __len__(self):
        return self.proposals.shape[0]

    @property
    def num_fg(self) -> int:
        return int((self.labels > 0).sum())

    def samples(self) -> list:
        out, nf = [], self.num_fg
        for i in range(len(self)):
            fg = i < nf
            out.append(RoiSample(
                tuple(self.proposals[i].tolist()), int(self.labels[i]),
                int(self.matched_gt[i]) if fg else None,
                tuple(self.box_targets[i].tolist()) if fg else None,
                self.mask_targets[i].numpy() if fg else None,
            ))
        return out


def mask_targets_for(gt_masks, matched, proposals, mask_size: int = 28) -> torch.Tensor:
    """Crop each matched GT mask to its proposal and resample to mask_size^2 (>= 0.5 -> 1)."""
    if proposals.shape[0] == 0:
        return torch.zeros((0, mask_size, mask_size))
    masks = torch.as_tensor(np.asarray(gt_masks), dtype=torch.float64)
    out = []
    for i in range(proposals.shape[0]):
        crop = roi_align(masks[int(matched[i])][None], proposals[i:i + 1].double(), mask_size, 1.0, 2)
        out.append((crop[0, 0] >= 0.5).to(torch.float32))
    return torch.stack(out)


def assign_and_sample_rois(proposals, gt_boxes, gt_masks, n: int = 512, pos_fraction: float = 0.25,
                           fg_iou: float = 0.5, seed=0, mask_size: int = 28, gt_labels=None) -> RoiSamples:
    """Label proposals by best-GT IoU (foreground when >= fg_iou) and draw at
    most ``n`` of them with foreground capped at ``n * pos_fraction``; the rest
    is filled with background."""
    if n < 4:
        raise ValueError("n must be >= 4")
    proposals = torch.as_tensor(proposals, dtype=torch.float32).reshape(-1, 4)
    gt = torch.as_tensor(gt_boxes, dtype=torch.float32).reshape(-1, 4)
    empty = RoiSamples(torch.zeros((0, 4)), torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long),
                       torch.zeros((0, 4)), torch.zeros((0, mask_size, mask_size)))
    if proposals.shape[0] == 0:
        return empty
    rng = _rng(seed)
    if gt.shape[0]:
        overlaps = box_iou(proposals, gt)
        max_iou, argmax = overlaps.max(dim=1)
        fg = torch.nonzero(max_iou >= fg_iou).flatten().numpy()
        bg = torch.nonzero(max_iou < fg_iou).flatten().numpy()
    else:
        argmax = torch.zeros(proposals.shape[0], dtype=torch.long)
        fg, bg = np.zeros(0, dtype=np.int64), np.arange(proposals.shape[0])
    n_fg = min(len(fg), int(n * pos_fraction))
    fg = rng.choice(fg, n_fg, replace=False) if n_fg < len(fg) else fg
    n_bg = min(len(bg), n - n_fg)
    bg = rng.choice(bg, n_bg, replace=False) if n_bg < len(bg) else bg
    keep = torch.as_tensor(np.concatenate([fg, bg]).astype(np.int64))
    rois = proposals[keep]
    labels = torch.zeros(len(keep), dtype=torch.long)
    matched = torch.full((len(keep),), -1, dtype=torch.long)
    if n_fg:
        m = argmax[torch.as_tensor(fg.astype(np.int64))]
        matched[:n_fg] = m
        labels[:n_fg] = 1 if gt_labels is None else torch.as_tensor(gt_labels)[m]
        box_t = encode_box_deltas(rois[:n_fg].double(), gt[m].double()).float()
        mask_t = mask_targets_for(gt_masks, m, rois[:n_fg], mask_size)
    else:
        box_t, mask_t = torch.zeros((0, 4)), torch.zeros((0, mask_size, mask_size))
    return RoiSamples(rois, labels, matched, box_t, mask_t)


# --- heads -------------------------------------------------------------------

class BoxHead(nn.Module):
    """Two shared 1024-wide layers (each dense + batch norm + ReLU), then
    class logits (num_classes + 1) and per-class box deltas."""

    def __init__(self, in_channels=256, pool_size=7, num_classes=1, hidden=1024, bg_deltas=False,
                 bn_momentum=0.9, bn_eps=1e-5, train_bn=True):
        super().__init__()
        bn = dict(activation="relu", bn_momentum=bn_momentum, bn_eps=bn_eps, train_bn=train_bn)
        self.in_channels, self.pool_size, self.num_classes = in_channels, pool_size, num_classes
        self.bg_deltas = bg_deltas
        self.fc1 = ConvBN(in_channels * pool_size * pool_size, hidden, None, bias=True, **bn)
        self.fc2 = ConvBN(hidden, hidden, None, bias=True, **bn)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.bbox = nn.Linear(hidden, 4 * (num_classes + 1 if bg_deltas else num_classes))
        nn.init.normal_(self.cls.weight, 0.0, 0.01)
        nn.init.normal_(self.bbox.weight, 0.0, 0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.bbox.bias)

    def forward(self, pooled):
        expected = (self.in_channels, self.pool_size, self.pool_size)
        if pooled.dim() != 4 or tuple(pooled.shape[1:]) != expected:
            raise ValueError(f"box head expects (R, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(pooled.shape)}")
        x = self.fc2(self.fc1(pooled.flatten(1)))
        return self.cls(x), self.bbox(x)

    def class_deltas(self, deltas, classes):
        """Pick the 4 deltas belonging to each row's class."""
        d = deltas.reshape(deltas.shape[0], -1, 4)
        col = classes if self.bg_deltas else (classes - 1).clamp(min=0)
        return d[torch.arange(d.shape[0]), col]


class MaskHead(nn.Module):
    """Four 3x3 conv + batch norm + ReLU, a stride-2 2x2 transposed conv
    (14 -> 28), and a 1x1 conv to one logit map per class (background
    included)."""

    def __init__(self, in_channels=256, channels=256, num_convs=4, num_classes=1, pool_size=14,
                 bn_momentum=0.9, bn_eps=1e-5, train_bn=True):
        super().__init__()
        bn = dict(activation="relu", bn_momentum=bn_momentum, bn_eps=bn_eps, train_bn=train_bn)
        self.in_channels, self.pool_size = in_channels, pool_size
        self.convs = nn.ModuleList(
            ConvBN(in_channels if i == 0 else channels, channels, 3, bias=True, **bn) for i in range(num_convs))
        self.deconv = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.logits = nn.Conv2d(channels, num_classes + 1, 1)
        nn.init.normal_(self.deconv.weight, 0.0, math.sqrt(2.0 / (channels * 4)))
        nn.init.zeros_(self.deconv.bias)
        nn.init.kaiming_normal_(self.logits.weight, mode="fan_out", nonlinearity="relu")
        nn.init.zeros_(self.logits.bias)

    def forward(self, pooled):
        """Per-pixel logits (R, num_classes + 1, 2p, 2p)."""
        if pooled.dim() != 4 or pooled.shape[1] != self.in_channels:
            raise ValueError(f"mask head expects (R, {self.in_channels}, p, p), got {tuple(pooled.shape)}")
        x = pooled
        for conv in self.convs:
            x = conv(x)
        return self.logits(F.relu(self.deconv(x)))


def box_head_forward(head: BoxHead, pooled):
    return head(pooled)


def mask_head_forward(head: MaskHead, pooled):
    """Mask probabilities in [0, 1], shape (R, num_classes + 1, 28, 28)."""
    return torch.sigmoid(head(pooled))


# --- pasting -----------------------------------------------------------------

def paste_mask(mask28, box, image_size, threshold: float = 0.5) -> np.ndarray:
    """Resample a box-relative probability mask onto the image grid.

    Each pixel whose centre lies inside ``box`` samples ``mask28``
    bilinearly (edge-clamped) at the corresponding position; the result is
    thresholded (>= threshold). Pixels outside the box are 0.
    """
    h_img, w_img = image_size
    out = np.zeros((h_img, w_img), dtype=np.uint8)
    m = np.asarray(mask28, dtype=np.float64)
    mh, mw = m.shape
    x1, y1, x2, y2 = (float(v) for v in box)
    x1, x2 = max(x1, 0.0), min(x2, float(w_img))
    y1, y2 = max(y1, 0.0), min(y2, float(h_img))
    bw, bh = x2 - x1, y2 - y1
    if bw <= 0 or bh <= 0:
        return out
    # pixel x is inside when x1 <= x + 0.5 < x2
    cols = np.arange(int(math.ceil(x1 - 0.5)), int(math.ceil(x2 - 0.5)))
    rows = np.arange(int(math.ceil(y1 - 0.5)), int(math.ceil(y2 - 0.5)))
    cols = cols[(cols >= 0) & (cols < w_img)]
    rows = rows[(rows >= 0) & (rows < h_img)]
    if cols.size == 0 or rows.size == 0:
        return out
    # use the unclipped box for the mask frame so clipping does not stretch it
    ox1, oy1, ox2, oy2 = (float(v) for v in box)
    u = np.clip((cols + 0.5 - ox1) / (ox2 - ox1) * mw - 0.5, 0, mw - 1)
    v = np.clip((rows + 0.5 - oy1) / (oy2 - oy1) * mh - 0.5, 0, mh - 1)
    u0 = np.minimum(np.floor(u).astype(int), mw - 2) if mw > 1 else np.zeros_like(u, dtype=int)
    v0 = np.minimum(np.floor(v).astype(int), mh - 2) if mh > 1 else np.zeros_like(v, dtype=int)
    fu, fv = u - u0, v - v0
    u1, v1 = np.minimum(u0 + 1, mw - 1), np.minimum(v0 + 1, mh - 1)
    top = m[v0][:, u0] * (1 - fu) + m[v0][:, u1] * fu
    bot = m[v1][:, u0] * (1 - fu) + m[v1][:, u1] * fu
    vals = top * (1 - fv)[:, None] + bot * fv[:, None]
    out[np.ix_(rows, cols)] = (vals >= threshold).astype(np.uint8)
    return out


@dataclass
class Detection:
    box: tuple  # (x1, y1, x2, y2)
    class_id: int
    score: float
    mask28: np.ndarray  # (28, 28) probabilities
    image_mask: np.ndarray  # (H, W) {0, 1}
