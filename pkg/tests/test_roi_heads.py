import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mask_iou_scalar, roi_align_scalar
from splicedet.roi_heads import (BoxHead, MaskHead, assign_and_sample_rois, box_head_forward, mask_head_forward,
                                 mask_targets_for, paste_mask, roi_align, roi_levels)


def random_box(rng, size, min_side=1.0):
    x1, y1 = rng.uniform(-2, size - min_side, 2)
    w, h = rng.uniform(min_side, size / 1.5, 2)
    return [x1, y1, x1 + w, y1 + h]


# --- ROIAlign ---------------------------------------------------------------------------

def test_constant_map():
    feat = torch.full((3, 10, 10), 2.5, dtype=torch.float64)
    out = roi_align(feat, torch.tensor([[1.3, 2.2, 7.9, 8.1]], dtype=torch.float64), (5, 4), 1.0, 2)
    assert torch.allclose(out, torch.full_like(out, 2.5))


def test_aligned_box_equals_average_pooling():
    feat = torch.arange(64, dtype=torch.float64).reshape(1, 8, 8)
    # bins of 2x2 cells, one sample at each bin centre, which is a cell corner: mean of 4 cells
    out = roi_align(feat, torch.tensor([[0.0, 0.0, 8.0, 8.0]], dtype=torch.float64), (4, 4), 1.0, 1)
    pooled = torch.nn.functional.avg_pool2d(feat[None], 2)[0]
    assert torch.allclose(out[0], pooled)


def test_stride_divides_without_rounding():
    rng = np.random.default_rng(1)
    feat = torch.tensor(rng.normal(size=(2, 12, 12)))
    box = torch.tensor([[3.3, 5.1, 40.7, 33.9]], dtype=torch.float64)
    a = roi_align(feat, box, 7, 4.0, 2)
    b = roi_align(feat, box / 4.0, 7, 1.0, 2)
    assert torch.allclose(a, b)
    assert np.allclose(a[0].numpy(), roi_align_scalar(feat.numpy(), box[0].tolist(), 7, 7, 4.0, 2))


def test_matches_scalar_oracle_random_boxes():
    rng = np.random.default_rng(0)
    feat = rng.normal(size=(2, 16, 16))
    boxes = np.array([random_box(rng, 16) for _ in range(40)])
    got = roi_align(torch.tensor(feat), torch.tensor(boxes), (3, 4), 1.0, 2).numpy()
    for g, b in zip(got, boxes):
        want = roi_align_scalar(feat, b, 3, 4, 1.0, 2)
        assert np.max(np.abs(g - want)) <= 1e-6 * max(1.0, np.max(np.abs(want)))


def test_roi_align_errors_and_empty():
    feat = torch.zeros(2, 4, 4)
    with pytest.raises(ValueError):
        roi_align(feat, torch.tensor([[1.0, 1.0, 1.0, 3.0]]))
    with pytest.raises(ValueError):
        roi_align(feat, torch.tensor([[0.0, 0.0, 2.0, 2.0]]), (0, 2))
    assert roi_align(feat, torch.zeros(0, 4), (7, 7)).shape == (0, 2, 7, 7)


def test_continuity_in_box_coordinates():
    rng = np.random.default_rng(2)
    feat = torch.tensor(rng.normal(size=(1, 20, 20)))
    box = torch.tensor([[3.0, 4.0, 13.0, 15.0]], dtype=torch.float64)
    base = roi_align(feat, box, 7, 1.0, 2)
    for eps in (1e-3, 1e-4, 1e-5):
        moved = roi_align(feat, box + eps, 7, 1.0, 2)
        # bilinear slope is bounded by twice the largest neighbouring difference
        bound = 2 * float(feat.abs().max()) * 2 * eps * 2
        assert float((moved - base).abs().max()) <= bound


def test_roi_align_gradcheck():
    rng = np.random.default_rng(3)
    feat = torch.tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    box = torch.tensor([[0.7, 1.3, 4.4, 5.1]], dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda f, b: roi_align(f, b, (2, 3), 1.0, 2), (feat, box), eps=1e-6,
                                    atol=1e-6, rtol=1e-4)


def test_roi_levels():
    boxes = torch.tensor([[0.0, 0, 224, 224], [0, 0, 112, 112], [0, 0, 10, 10], [0, 0, 900, 900]])
    assert roi_levels(boxes).tolist() == [4, 3, 2, 5]


# --- ROI sampling -----------------------------------------------------------------------------

def _gt(h=64, w=64):
    masks = np.zeros((2, h, w), np.uint8)
    masks[0, 5:25, 8:30] = 1
    masks[1, 35:60, 30:62] = 1
    boxes = torch.tensor([[8.0, 5, 30, 25], [30.0, 35, 62, 60]])
    return boxes, masks


def test_proposals_equal_gt_all_foreground():
    boxes, masks = _gt()
    s = assign_and_sample_rois(boxes, boxes, masks, n=16, pos_fraction=0.5, seed=0)
    assert s.num_fg == 2 and len(s) == 2
    assert torch.allclose(s.box_targets, torch.zeros(2, 4), atol=1e-6)
    assert s.mask_targets.shape == (2, 28, 28)
    assert s.mask_targets.min() == 1.0  # the GT box is fully covered by its mask here


def test_exact_1_to_3_sampling():
    rng = np.random.default_rng(0)
    boxes, masks = _gt()
    fg = boxes[0] + torch.tensor(rng.uniform(-1, 1, (300, 4)), dtype=torch.float32)
    bg = torch.tensor([[40.0, 0, 60, 20]]) + torch.tensor(rng.uniform(-1, 1, (900, 4)), dtype=torch.float32)
    s = assign_and_sample_rois(torch.cat([fg, bg]), boxes, masks, n=512, pos_fraction=0.25, seed=1)
    assert (s.num_fg, len(s) - s.num_fg) == (128, 384)
    samples = s.samples()
    assert all(r.box_target is None and r.mask_target is None for r in samples if r.label == 0)
    assert all(r.matched_gt == 0 for r in samples if r.label == 1)


def test_sampling_cap_never_exceeded():
    boxes, masks = _gt()
    proposals = boxes.repeat(50, 1)
    s = assign_and_sample_rois(proposals, boxes, masks, n=64, pos_fraction=0.25, seed=0)
    assert s.num_fg == 16
    assert len(s) == 16  # no background candidates to fill with


def test_sampling_edge_cases():
    boxes, masks = _gt()
    assert len(assign_and_sample_rois(torch.zeros(0, 4), boxes, masks, 16)) == 0
    s = assign_and_sample_rois(boxes, torch.zeros(0, 4), np.zeros((0, 64, 64)), 16)
    assert s.num_fg == 0 and len(s) == 2
    with pytest.raises(ValueError):
        assign_and_sample_rois(boxes, boxes, masks, n=3)


def test_sampling_deterministic():
    boxes, masks = _gt()
    rng = np.random.default_rng(5)
    proposals = torch.tensor(np.array([random_box(rng, 64, 4) for _ in range(200)]), dtype=torch.float32)
    a = assign_and_sample_rois(proposals, boxes, masks, 32, 0.25, seed=3)
    b = assign_and_sample_rois(proposals, boxes, masks, 32, 0.25, seed=3)
    assert torch.equal(a.proposals, b.proposals)


def test_mask_target_roundtrip():
    yy, xx = np.mgrid[:96, :96]
    gt = ((yy - 48) ** 2 / 30 ** 2 + (xx - 45) ** 2 / 22 ** 2 <= 1).astype(np.uint8)
    box = torch.tensor([[20.0, 15, 72, 81]])  # covers the region entirely
    target = mask_targets_for(gt[None], torch.tensor([0]), box)[0].numpy()
    up = paste_mask(target, box[0].tolist(), (96, 96))
    crop = gt * 0
    crop[15:81, 20:72] = gt[15:81, 20:72]
    assert mask_iou_scalar(up, crop) >= 0.9


# --- heads ------------------------------------------------------------------------------------

def test_box_head_shapes_and_uniform_logits():
    head = BoxHead(8, 7, 1, hidden=32).eval()
    torch.nn.init.zeros_(head.cls.weight)
    logits, deltas = box_head_forward(head, torch.randn(5, 8, 7, 7))
    assert logits.shape == (5, 2) and deltas.shape == (5, 4)
    assert torch.allclose(torch.softmax(logits, 1), torch.full((5, 2), 0.5))
    with pytest.raises(ValueError):
        head(torch.randn(5, 8, 6, 6))


def test_box_head_batched_equals_per_roi():
    torch.manual_seed(0)
    head = BoxHead(4, 7, 1, hidden=16).eval().double()
    x = torch.randn(512, 4, 7, 7, dtype=torch.float64)
    logits, deltas = head(x)
    singles = [head(x[i:i + 1]) for i in range(0, 512, 37)]
    for k, i in enumerate(range(0, 512, 37)):
        assert torch.allclose(logits[i], singles[k][0][0], atol=1e-6)
        assert torch.allclose(deltas[i], singles[k][1][0], atol=1e-6)


def test_mask_head_shape_range_and_zero_logits():
    torch.manual_seed(0)
    head = MaskHead(8, 8, 4, 1).eval()
    x = torch.randn(3, 8, 14, 14)
    probs = mask_head_forward(head, x)
    assert probs.shape == (3, 2, 28, 28)
    assert probs.min() >= 0 and probs.max() <= 1
    torch.nn.init.zeros_(head.logits.weight)
    assert torch.allclose(mask_head_forward(head, x), torch.full((3, 2, 28, 28), 0.5))
    assert mask_head_forward(head, torch.randn(1, 8, 7, 7)).shape[-1] == 14  # transposed conv doubles
    with pytest.raises(ValueError):
        head(torch.randn(1, 5, 14, 14))


def test_mask_head_batched_equals_per_roi():
    torch.manual_seed(1)
    head = MaskHead(4, 8, 4, 1).eval().double()
    x = torch.randn(12, 4, 14, 14, dtype=torch.float64)
    full = head(x)
    assert torch.allclose(torch.cat([head(x[i:i + 1]) for i in range(12)]), full, atol=1e-6)


# --- pasting --------------------------------------------------------------------------------------

def test_paste_full_image():
    assert paste_mask(np.ones((28, 28)), (0, 0, 40, 30), (30, 40)).all()


def test_paste_degenerate_box_empty():
    assert paste_mask(np.ones((28, 28)), (5, 5, 5, 9), (20, 20)).sum() == 0
    assert paste_mask(np.ones((28, 28)), (30, 30, 40, 40), (20, 20)).sum() == 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(1, 40), st.floats(1, 40))
def test_paste_area_and_support(x1, y1, w, h):
    box = (x1, y1, x1 + w, y1 + h)
    m = paste_mask(np.ones((28, 28)), box, (64, 64))
    cx1, cy1, cx2, cy2 = max(x1, 0), max(y1, 0), min(x1 + w, 64), min(y1 + h, 64)
    area = max(0, cx2 - cx1) * max(0, cy2 - cy1)
    perimeter = 2 * (max(0, cx2 - cx1) + max(0, cy2 - cy1))
    assert abs(int(m.sum()) - area) <= perimeter + 4
    ys, xs = np.nonzero(m)
    if len(xs):
        assert xs.min() + 0.5 >= x1 and xs.max() + 0.5 < x1 + w
        assert ys.min() + 0.5 >= y1 and ys.max() + 0.5 < y1 + h


@pytest.mark.parametrize("seed", range(5))
def test_paste_crop_roundtrip(seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:28, :28]
    cy, cx, r = rng.uniform(10, 18), rng.uniform(10, 18), rng.uniform(6, 10)
    mask28 = ((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r).astype(np.float64)
    x1, y1 = rng.uniform(0, 40, 2)
    w, h = rng.uniform(56, 100, 2)
    box = torch.tensor([[x1, y1, x1 + w, y1 + h]])
    pasted = paste_mask(mask28, box[0].tolist(), (160, 160))
    back = mask_targets_for(pasted[None], torch.tensor([0]), box)[0].numpy()
    assert mask_iou_scalar(back, mask28 >= 0.5) >= 0.9
