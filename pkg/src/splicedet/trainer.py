"""SGD training loop, checkpoints and k-fold cross-validation."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import Config
from .evaluator import MetricsReport, evaluate, ground_truth_from_samples, mean_reports
from .losses import NonFiniteLossError
from .model import MaskRCNN, predict_records, training_inputs

LOG_COLUMNS = ("iter", "epoch", "lr", "l_total", "l_rpn_cls", "l_rpn_box", "l_roi_cls", "l_roi_box", "l_mask")
NO_DECAY_SUFFIXES = ("bias", "bn_gamma", "bn_beta")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name}")
        self.name = name


class TrainingAborted(RuntimeError):
    def __init__(self, reason, last_checkpoint=None, iteration=None):
        super().__init__(f"training aborted at iteration {iteration}: {reason}")
        self.reason = reason
        self.last_checkpoint = last_checkpoint
        self.iteration = iteration


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    lr_drops: tuple = ((120, 0.003), (240, 0.001))
    total_epochs: int = 360
    momentum: float = 0.9
    weight_decay: float = 0.0001
    steps_per_epoch: int = 50
    seed: int = 0
    total_steps: int | None = None  # literal iteration count; overrides epochs * steps
    grad_clip: float | None = 10.0
    checkpoint_every: int = 10
    accumulate_steps: int = 1  # images whose gradients are summed into one optimizer step

    def __post_init__(self):
        self.lr_drops = tuple(tuple(d) for d in self.lr_drops)
        lrs = [self.base_lr] + [lr for _, lr in self.lr_drops]
        if any(b >= a for a, b in zip(lrs, lrs[1:])):
            raise ValueError("learning rates must be strictly decreasing")
        epochs = [e for e, _ in self.lr_drops]
        if any(b <= a for a, b in zip(epochs, epochs[1:])) or (epochs and (epochs[0] <= 0 or epochs[-1] >= self.total_epochs)):
            raise ValueError("drop epochs must be strictly increasing and inside (0, total_epochs)")
        if self.steps_per_epoch < 1 or self.total_epochs < 1 or self.accumulate_steps < 1:
            raise ValueError("steps_per_epoch, total_epochs and accumulate_steps must be positive")

    @classmethod
    def from_config(cls, cfg: Config, **overrides) -> "TrainConfig":
        values = dict(base_lr=cfg.LEARNING_RATE, lr_drops=cfg.LR_DROPS, total_epochs=cfg.EPOCHS,
                      momentum=cfg.MOMENTUM, weight_decay=cfg.WEIGHT_DECAY, steps_per_epoch=cfg.STEPS_PER_EPOCH,
                      seed=cfg.SEED, total_steps=cfg.TOTAL_STEPS, grad_clip=cfg.GRADIENT_CLIP_NORM,
                      checkpoint_every=cfg.CHECKPOINT_EVERY_EPOCHS, accumulate_steps=cfg.ACCUMULATE_STEPS)
        values.update(overrides)
        return cls(**values)

    @property
    def total_iterations(self) -> int:
        return self.total_steps if self.total_steps is not None else self.total_epochs * self.steps_per_epoch

    def epoch_of(self, iteration: int) -> int:
        # with a literal step count the schedule saturates at the last epoch
        return min(iteration // self.steps_per_epoch, self.total_epochs - 1)


def lr_at_epoch(epoch: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    lr = cfg.base_lr
    for start, value in cfg.lr_drops:
        if epoch >= start:
            lr = value
    return lr


def decays(name: str) -> bool:
    """Weight decay applies to weights only, not biases or BN scale/shift."""
    return not name.endswith(NO_DECAY_SUFFIXES)


def _finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.all(np.isfinite(x)))


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0001, no_decay=()):
    """One momentum-SGD update; returns new ``(params, velocity)`` dicts.

    g' = g + wd * p (skipped for names in ``no_decay``); v' = m * v + g';
    p' = p - lr * v'. A missing velocity entry starts at zero.
    """
    for name, g in grads.items():
        if g is not None and not _finite(g):
            raise NonFiniteGradientError(name)
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_p[name] = p
            if name in velocity:
                new_v[name] = velocity[name]
            continue
        if weight_decay and name not in no_decay:
            g = g + weight_decay * p
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v


class SGD:
    """Momentum SGD over a module's named parameters, updating them in place."""

    def __init__(self, model: torch.nn.Module, momentum=0.9, weight_decay=1e-4, grad_clip=None):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.named = {n: p for n, p in model.named_parameters() if p.requires_grad}
        self.no_decay = {n for n in self.named if not decays(n)}
        self.velocity = {n: torch.zeros_like(p) for n, p in self.named.items()}

    def zero_grad(self):
        for p in self.named.values():
            p.grad = None

    def step(self, lr: float) -> float:
        grads = {n: p.grad for n, p in self.named.items()}
        for n, g in grads.items():
            if g is not None and not _finite(g):
                raise NonFiniteGradientError(n)
        present = [g for g in grads.values() if g is not None]
        norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in present))) if present else 0.0
        if self.grad_clip and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-6)
            grads = {n: None if g is None else g * scale for n, g in grads.items()}
        with torch.no_grad():
            params = {n: p.detach() for n, p in self.named.items()}
            new_p, new_v = sgd_step(params, grads, self.velocity, lr, self.momentum, self.weight_decay,
                                    self.no_decay)
            for n, p in self.named.items():
                p.copy_(new_p[n])
            self.velocity = {n: new_v.get(n, self.velocity[n]) for n in self.named}
        return norm


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: MaskRCNN, optimizer: SGD | None = None, train_cfg: TrainConfig | None = None,
                    iteration: int = 0, extra: dict | None = None) -> Path:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"velocity.{k}": v.cpu().numpy() for k, v in optimizer.velocity.items()})
    meta = {"config": model.config.dumps(), "iteration": iteration}
    if train_cfg is not None:
        meta["train_config"] = asdict(train_cfg)
    if extra:
        meta.update(extra)
    ckpt.save(path, tensors, meta)
    return Path(path)


def load_checkpoint(path, model: MaskRCNN | None = None):
    """Returns ``(model, velocity, meta)``; builds the model from the stored
    config when none is given."""
    tensors, meta = ckpt.load(path)
    if model is None:
        model = MaskRCNN(Config.loads(meta["config"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("velocity.")}
    model.load_state_dict(state, strict=True)
    velocity = {k[len("velocity."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("velocity.")}
    return model, velocity, meta


# --- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    model: MaskRCNN
    log: list
    checkpoints: list = field(default_factory=list)
    best_checkpoint: Path | None = None
    best_score: float | None = None


def _format_row(row: dict) -> list:
    return [row["iter"], row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[2:]]


def evaluate_model(model: MaskRCNN, samples, matching_iou=None, iou_kind=None) -> MetricsReport:
    cfg = model.config
    preds = predict_records(model, samples)
    return evaluate(preds, ground_truth_from_samples(samples),
                    cfg.MATCHING_IOU if matching_iou is None else matching_iou,
                    cfg.IOU_KIND if iou_kind is None else iou_kind)


def train(model: MaskRCNN, samples, cfg: TrainConfig | None = None, callbacks=(), out_dir=None,
          val_samples=None) -> TrainResult:
    """Batch-size-1 SGD. Images are drawn from successive seeded permutations
    of the samples; each optimizer step accumulates ``accumulate_steps``
    single-image gradients, averaged. Logged losses are the per-step mean.

    ``callbacks`` are called as ``cb(row)`` after every iteration. With
    ``out_dir`` a ``train_log.csv`` is streamed and checkpoints are written
    every ``checkpoint_every`` epochs plus ``best.ckpt`` when validation F1
    improves.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set")
    cfg = cfg or TrainConfig.from_config(model.config)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    size = model.config.image_size
    cache = {}
    opt = SGD(model, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    out = Path(out_dir) if out_dir is not None else None
    writer = log_file = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    result = TrainResult(model, [])
    order: list = []
    model.train()
    try:
        for it in range(cfg.total_iterations):
            epoch = cfg.epoch_of(it)
            lr = lr_at_epoch(epoch, cfg)
            opt.zero_grad()
            step_losses = []
            try:
                for _ in range(cfg.accumulate_steps):
                    if not order:
                        order = rng.permutation(len(samples)).tolist()
                    idx = order.pop(0)
                    if idx not in cache:
                        cache[idx] = training_inputs(samples[idx], size)
                    x, boxes, masks = cache[idx]
                    losses = model.forward_train(x, boxes, masks, rng)
                    (losses.l_total / cfg.accumulate_steps).backward()
                    step_losses.append(losses.as_floats())
                opt.step(lr)
            except (NonFiniteLossError, NonFiniteGradientError) as err:
                last = result.checkpoints[-1] if result.checkpoints else None
                raise TrainingAborted(str(err), last, it) from err
            means = {k: float(np.mean([d[k] for d in step_losses])) if len(step_losses) > 1 else step_losses[0][k]
                     for k in step_losses[0]}
            row = {"iter": it, "epoch": epoch, "lr": lr, **means}
            result.log.append(row)
            if writer is not None:
                writer.writerow(_format_row(row))
                log_file.flush()
            for cb in callbacks or ():
                cb(row)
            end_of_epoch = (it + 1) % cfg.steps_per_epoch == 0 or it + 1 == cfg.total_iterations
            if out is not None and end_of_epoch and (
                    (epoch + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.total_iterations):
                path = save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt", model, opt, cfg, it + 1)
                result.checkpoints.append(path)
                if val_samples:
                    report = evaluate_model(model, val_samples)
                    model.train()
                    if result.best_score is None or report.f1 > result.best_score:
                        result.best_score = report.f1
                        result.best_checkpoint = save_checkpoint(out / "checkpoints" / "best.ckpt", model, opt,
                                                                 cfg, it + 1, {"val_f1": report.f1})
    finally:
        if log_file is not None:
            log_file.close()
        model.eval()
    return result


# --- k-fold -----------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    folds: list  # [(train_ids, val_ids)]
    seed: int = 0

    def val_ids(self):
        return [v for _, v in self.folds]


def _sample_id(s):
    return getattr(s, "source_id", s)


def kfold(samples, k: int = 5, seed: int = 0) -> FoldPlan:
    """Random partition into ``k`` validation folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    ids = [_sample_id(s) for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    if len(ids) < k:
        raise ValueError(f"need at least k={k} samples, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for chunk in np.array_split(perm, k):
        val = set(chunk.tolist())
        folds.append(([ids[i] for i in range(len(ids)) if i not in val], [ids[i] for i in sorted(val)]))
    return FoldPlan(k, folds, seed)


@dataclass
class KFoldResult:
    reports: list
    mean: dict


def run_kfold(model_factory: Callable[[int], MaskRCNN], plan: FoldPlan, cfg: TrainConfig, samples,
              evaluate_fn=None, out_dir=None) -> KFoldResult:
    """Train one fresh model per fold and evaluate it on the held-out fold."""
    by_id = {_sample_id(s): s for s in samples}
    evaluate_fn = evaluate_fn or evaluate_model
    reports = []
    for i, (train_ids, val_ids) in enumerate(plan.folds):
        fold_dir = Path(out_dir) / f"fold_{i}" if out_dir is not None else None
        model = model_factory(i)
        res = train(model, [by_id[t] for t in train_ids], cfg, out_dir=fold_dir)
        report = evaluate_fn(res.model, [by_id[v] for v in val_ids])
        if fold_dir is not None:
            report.write(fold_dir)
        reports.append(report)
    return KFoldResult(reports, mean_reports(reports))
