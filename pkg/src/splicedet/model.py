"""Mask R-CNN with a MobileNet V1 + FPN backbone."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .backbone import FPN, BackboneConfig, MobileNetV1
from .config import Config
from .dataset import AnnotatedSample, ResizeInfo, mask_to_box, prepare_sample, resize_and_pad
from .evaluator import ImageRecord, Instance
from .losses import LossConfig, mask_loss, roi_losses, rpn_loss_from_logits, total_loss
from .roi_heads import (BoxHead, Detection, MaskHead, assign_and_sample_rois, multilevel_roi_align,
                        paste_mask)
from .rpn import (POSITIVE, RPNHead, decode_box_deltas, encode_box_deltas, generate_anchors, match_anchors,
                  nms, propose, sample_anchor_minibatch)

LEVELS = ("P2", "P3", "P4", "P5", "P6")


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 H x W x 3 -> (1, 3, H, W) float in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
    return (x / 127.5 - 1.0).unsqueeze(0)


class MaskRCNN(nn.Module):
    def __init__(self, config: Config | None = None):
        super().__init__()
        self.config = cfg = config or Config()
        bn = dict(bn_momentum=cfg.BN_MOMENTUM, bn_eps=cfg.BN_EPS, train_bn=cfg.TRAIN_BN)
        self.backbone = MobileNetV1(BackboneConfig(cfg.DEPTH_MULTIPLIER, cfg.RESOLUTION_MULTIPLIER, **bn))
        in_ch = [self.backbone.stage_channels[f"C{k}"] for k in range(2, 6)]
        self.fpn = FPN(in_ch, cfg.FPN_CHANNELS)
        self.rpn = RPNHead(cfg.FPN_CHANNELS, cfg.RPN_CONV_CHANNELS, len(cfg.RPN_ANCHOR_RATIOS))
        self.box_head = BoxHead(cfg.FPN_CHANNELS, cfg.POOL_SIZE, cfg.NUM_CLASSES, cfg.BOX_HEAD_DIM,
                                cfg.BG_BOX_DELTAS, **bn)
        self.mask_head = MaskHead(cfg.FPN_CHANNELS, cfg.MASK_HEAD_CHANNELS, cfg.MASK_HEAD_CONVS,
                                  cfg.NUM_CLASSES, cfg.MASK_POOL_SIZE, **bn)
        self.loss_config = LossConfig(cfg.RPN_LAMBDA, cfg.RPN_CLS_NORM, cfg.RPN_REG_NORM, cfg.SMOOTH_L1_BETA)
        self._anchor_cache = {}

    # --- shared pieces ---
    def pyramid(self, x):
        return self.fpn(self.backbone(x))

    def anchors_for(self, size: int):
        if size not in self._anchor_cache:
            shapes = [(math.ceil(size / 2 ** k), math.ceil(size / 2 ** k), 2 ** k) for k in range(2, 7)]
            self._anchor_cache[size] = generate_anchors(
                shapes, self.config.RPN_ANCHOR_SCALES, self.config.RPN_ANCHOR_RATIOS, self.config.ANCHOR_SCALE_UNITS)
        return self._anchor_cache[size]

    def _std(self, dtype=torch.float32):
        return torch.tensor(self.config.BBOX_STD_DEV, dtype=dtype)

    def _roi_pool(self, pyramid, boxes, size):
        cfg = self.config
        return multilevel_roi_align(pyramid, boxes, size, cfg.ROI_SAMPLING_RATIO,
                                    cfg.ROI_CANONICAL_SIZE, cfg.ROI_CANONICAL_LEVEL)

    # --- training ---
    def forward_train(self, x, gt_boxes, gt_masks, rng):
        """Multi-task loss for one image. ``gt_boxes`` (G, 4), ``gt_masks`` (G, H, W)."""
        cfg = self.config
        size = x.shape[-1]
        gt = torch.as_tensor(np.asarray(gt_boxes, dtype=np.float32)).reshape(-1, 4)
        pyramid = self.pyramid(x)
        logits, deltas = self.rpn([pyramid[k] for k in LEVELS])
        anchors = self.anchors_for(size)

        labels = match_anchors(anchors, gt, cfg.RPN_POS_IOU, cfg.RPN_NEG_IOU)
        idx = sample_anchor_minibatch(labels, cfg.RPN_TRAIN_ANCHORS_PER_IMAGE, cfg.RPN_POS_FRACTION, rng)
        p_star = (labels.label[idx] == POSITIVE).long()
        t_star = torch.zeros((len(idx), 4))
        pos = p_star.bool()
        if pos.any():
            a = anchors.boxes[idx[pos]].double()
            t_star[pos] = (encode_box_deltas(a, gt[labels.matched_gt[idx[pos]]].double())
                           / self._std(torch.float64)).float()
        l_rpn_cls, l_rpn_box = rpn_loss_from_logits(logits[idx], p_star, deltas[idx], t_star, self.loss_config)

        with torch.no_grad():
            proposals, _ = propose(torch.softmax(logits, 1)[:, 1], deltas, anchors, (size, size),
                                   cfg.PRE_NMS_LIMIT_TRAIN, cfg.POST_NMS_ROIS_TRAINING, cfg.RPN_NMS_THRESHOLD,
                                   self._std())
        if cfg.USE_GT_AS_PROPOSALS and gt.shape[0]:
            proposals = torch.cat([proposals.float(), gt])
        rois = assign_and_sample_rois(proposals, gt, gt_masks, cfg.TRAIN_ROIS_PER_IMAGE, cfg.ROI_POSITIVE_RATIO,
                                      cfg.ROI_FG_IOU, rng, cfg.MASK_SHAPE[0])
        zero = logits.sum() * 0
        if len(rois) == 0:
            return total_loss(l_rpn_cls, l_rpn_box, zero, zero, zero)
        nf = rois.num_fg
        pooled = self._roi_pool(pyramid, rois.proposals, cfg.POOL_SIZE)
        cls_logits, box_deltas = self.box_head(pooled)
        fg_deltas = self.box_head.class_deltas(box_deltas[:nf], rois.labels[:nf])
        l_roi_cls, l_roi_box = roi_losses(cls_logits, rois.labels, fg_deltas, rois.box_targets / self._std(),
                                          cfg.SMOOTH_L1_BETA)
        if nf:
            mpooled = self._roi_pool(pyramid, rois.proposals[:nf], cfg.MASK_POOL_SIZE)
            mlogits = self.mask_head(mpooled)
            mlogits = mlogits[torch.arange(nf), rois.labels[:nf]]
            l_mask = mask_loss(logits=mlogits, mask_targets=rois.mask_targets)
        else:
            l_mask = zero
        return total_loss(l_rpn_cls, l_rpn_box, l_roi_cls, l_roi_box, l_mask)

    # --- inference ---
    @torch.no_grad()
    def detect(self, x, min_confidence=None) -> list:
        """Detections in network-input coordinates for one (1, 3, S, S) image."""
        cfg = self.config
        size = x.shape[-1]
        thr = cfg.DETECTION_MIN_CONFIDENCE if min_confidence is None else min_confidence
        pyramid = self.pyramid(x)
        logits, deltas = self.rpn([pyramid[k] for k in LEVELS])
        proposals, _ = propose(torch.softmax(logits, 1)[:, 1], deltas, self.anchors_for(size), (size, size),
                               cfg.PRE_NMS_LIMIT_INFERENCE, cfg.POST_NMS_ROIS_INFERENCE, cfg.RPN_NMS_THRESHOLD,
                               self._std())
        proposals = proposals.float()
        if proposals.shape[0] == 0:
            return []
        cls_logits, box_deltas = self.box_head(self._roi_pool(pyramid, proposals, cfg.POOL_SIZE))
        probs = torch.softmax(cls_logits, 1)
        boxes_all, scores_all, classes_all = [], [], []
        for c in range(1, cfg.NUM_CLASSES + 1):
            cls = torch.full((proposals.shape[0],), c, dtype=torch.long)
            d = self.box_head.class_deltas(box_deltas, cls) * self._std()
            boxes = decode_box_deltas(proposals, d, (size, size))
            scores = probs[:, c]
            ok = (scores >= thr) & (boxes[:, 2] - boxes[:, 0] > 0) & (boxes[:, 3] - boxes[:, 1] > 0)
            boxes, scores = boxes[ok], scores[ok]
            keep = nms(boxes, scores, cfg.DETECTION_NMS_THRESHOLD)
            boxes_all.append(boxes[keep])
            scores_all.append(scores[keep])
            classes_all.append(torch.full((len(keep),), c, dtype=torch.long))
        boxes = torch.cat(boxes_all)
        scores = torch.cat(scores_all)
        classes = torch.cat(classes_all)
        order = torch.sort(-scores.double(), stable=True).indices[: cfg.DETECTION_MAX_INSTANCES]
        boxes, scores, classes = boxes[order], scores[order], classes[order]
        if boxes.shape[0] == 0:
            return []
        mprobs = torch.sigmoid(self.mask_head(self._roi_pool(pyramid, boxes, cfg.MASK_POOL_SIZE)))
        mprobs = mprobs[torch.arange(boxes.shape[0]), classes].numpy()
        out = []
        for b, s, c, m in zip(boxes.tolist(), scores.tolist(), classes.tolist(), mprobs):
            out.append(Detection(tuple(b), int(c), float(s), m,
                                 paste_mask(m, b, (size, size), cfg.MASK_THRESHOLD)))
        return out


def build_model(config: Config | None = None, seed: int | None = None) -> MaskRCNN:
    if seed is not None:
        torch.manual_seed(seed)
    return MaskRCNN(config)


def detect_image(model: MaskRCNN, image: np.ndarray, min_confidence=None):
    """Run inference on an arbitrary-size uint8 image; returns detections
    mapped back to the image's own coordinates."""
    was_training = model.training
    model.eval()
    try:
        size = model.config.image_size
        resized, _, scale, pad = resize_and_pad(image, (), size)
        info = ResizeInfo(scale, pad, image.shape[:2], size)
        dets = model.detect(image_to_tensor(resized), min_confidence)
    finally:
        model.train(was_training)
    h, w = image.shape[:2]
    out = []
    for d in dets:
        box = info.inverse_boxes([d.box])[0]
        box = (max(0.0, box[0]), max(0.0, box[1]), min(float(w), box[2]), min(float(h), box[3]))
        out.append(Detection(tuple(float(v) for v in box), d.class_id, d.score, d.mask28,
                             info.inverse_mask(d.image_mask)))
    return out


def training_inputs(sample: AnnotatedSample, size: int):
    """Resize a sample for training: (tensor, gt boxes, gt masks)."""
    img, masks, _ = prepare_sample(sample, size)
    boxes = np.array([mask_to_box(m) for m in masks], dtype=np.float32).reshape(-1, 4)
    keep = [i for i, m in enumerate(masks) if m.any()]
    return image_to_tensor(img), boxes[keep], np.stack([masks[i] for i in keep]) if keep else np.zeros((0, size, size), np.uint8)


def detections_to_record(image_id: str, detections, height: int, width: int) -> ImageRecord:
    return ImageRecord(image_id, height, width,
                       [Instance(d.box, d.image_mask, d.score, d.class_id) for d in detections])


def predict_records(model: MaskRCNN, samples, min_confidence=None) -> dict:
    """image id -> ImageRecord of detections in original image coordinates."""
    return {s.source_id: detections_to_record(s.source_id, detect_image(model, s.image, min_confidence),
                                              s.height, s.width) for s in samples}
