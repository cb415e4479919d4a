"""Multi-task objective: RPN objectness + box terms, ROI classification and
box terms, and the foreground-only mask term."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

COMPONENTS = ("l_rpn_cls", "l_rpn_box", "l_roi_cls", "l_roi_box", "l_mask")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component):
        super().__init__(f"non-finite value in {component}")
        self.component = component


@dataclass
class LossConfig:
    lam: float = 1.0
    n_cls_norm: str | int = "sampled"  # "sampled" or a fixed count
    n_reg_norm: str | int = "sampled"  # "sampled", "positives" or a fixed count
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.lam <= 0 or self.smooth_l1_beta <= 0:
            raise ValueError("lambda and beta must be positive")


@dataclass
class LossBreakdown:
    l_total: object
    l_rpn_cls: object
    l_rpn_box: object
    l_roi_cls: object
    l_roi_box: object
    l_mask: object

    def as_floats(self) -> dict:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def _check_finite(name, *tensors):
    for t in tensors:
        t = torch.as_tensor(t)
        if t.numel() and not torch.isfinite(t).all():
            raise NonFiniteLossError(name)


def smooth_l1(x, beta: float = 1.0):
    """0.5 x^2 / beta below beta, |x| - 0.5 beta above; works on floats and tensors."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    ax = abs(x)
    return 0.5 * x * x / beta if ax < beta else ax - 0.5 * beta


def _normalizer(policy, n_sampled, n_pos):
    if policy == "sampled":
        return max(n_sampled, 1)
    if policy == "positives":
        return max(n_pos, 1)
    return max(int(policy), 1)


def _rpn_box_term(p_star, t, t_star, cfg, n_sampled):
    p_star = torch.as_tensor(p_star, dtype=t.dtype)
    per_anchor = smooth_l1(t - t_star, cfg.smooth_l1_beta).sum(dim=1)
    n_reg = _normalizer(cfg.n_reg_norm, n_sampled, int((p_star > 0).sum()))
    return cfg.lam * (p_star * per_anchor).sum() / n_reg


def rpn_loss(p, p_star, t, t_star, cfg: LossConfig | None = None):
    """(l_cls, l_box) from per-anchor foreground probabilities ``p``.

    Only sampled anchors are passed in. The box term is weighted by ``p_star``
    so negatives contribute nothing to it.
    """
    cfg = cfg or LossConfig()
    p, t, t_star = (torch.as_tensor(v) for v in (p, t, t_star))
    p_star_t = torch.as_tensor(p_star, dtype=p.dtype)
    _check_finite("rpn inputs", p, t, t_star)
    n = p.shape[0]
    if n == 0:
        zero = p.sum() * 0
        return zero, zero
    ce = -(p_star_t * torch.log(p) + (1 - p_star_t) * torch.log1p(-p))
    l_cls = ce.sum() / _normalizer(cfg.n_cls_norm, n, int((p_star_t > 0).sum()))
    return l_cls, _rpn_box_term(p_star_t, t.reshape(-1, 4), t_star.reshape(-1, 4), cfg, n)


def rpn_loss_from_logits(logits, p_star, t, t_star, cfg: LossConfig | None = None):
    """Same as :func:`rpn_loss` with the 2-way softmax folded in for stability."""
    cfg = cfg or LossConfig()
    _check_finite("rpn inputs", logits, t, t_star)
    n = logits.shape[0]
    if n == 0:
        zero = logits.sum() * 0
        return zero, zero
    labels = torch.as_tensor(p_star, dtype=torch.long)
    ce = F.cross_entropy(logits, labels, reduction="sum")
    l_cls = ce / _normalizer(cfg.n_cls_norm, n, int((labels > 0).sum()))
    return l_cls, _rpn_box_term(labels, t.reshape(-1, 4), t_star.reshape(-1, 4), cfg, n)


def roi_losses(class_logits, class_targets, box_deltas, box_targets, beta: float = 1.0):
    """Cross-entropy averaged over all sampled ROIs; smooth-L1 (summed over the
    four coordinates) averaged over foreground ROIs.

    ``box_deltas`` holds the target-class deltas of the foreground rows,
    (F, 4), aligned with ``box_targets``.
    """
    class_targets = torch.as_tensor(class_targets, dtype=torch.long)
    _check_finite("roi inputs", class_logits, box_deltas, box_targets)
    if class_logits.shape[0] == 0:
        zero = class_logits.sum() * 0
        return zero, zero
    l_cls = F.cross_entropy(class_logits, class_targets)
    if box_deltas.shape[0] == 0:
        return l_cls, box_deltas.sum() * 0
    l_box = smooth_l1(box_deltas - box_targets, beta).sum(dim=1).mean()
    return l_cls, l_box


def mask_loss(mask_probs=None, mask_targets=None, *, logits=None):
    """Mean per-pixel binary cross-entropy over foreground ROIs.

    Pass probabilities positionally, or ``logits=`` for the numerically
    stable form used in training.
    """
    src = logits if logits is not None else mask_probs
    if src is None or src.shape[0] == 0:
        return torch.tensor(0.0) if src is None else src.sum() * 0
    targets = torch.as_tensor(mask_targets, dtype=src.dtype)
    _check_finite("mask inputs", src, targets)
    if logits is not None:
        return F.binary_cross_entropy_with_logits(logits, targets)
    p = mask_probs
    return -(targets * torch.log(p) + (1 - targets) * torch.log1p(-p)).mean()


def total_loss(l_rpn_cls, l_rpn_box, l_roi_cls, l_roi_box, l_mask) -> LossBreakdown:
    parts = dict(zip(COMPONENTS, (l_rpn_cls, l_rpn_box, l_roi_cls, l_roi_box, l_mask)))
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name)
    total = parts["l_rpn_cls"] + parts["l_rpn_box"] + parts["l_roi_cls"] + parts["l_roi_box"] + parts["l_mask"]
    return LossBreakdown(l_total=total, **parts)
