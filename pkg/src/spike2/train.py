"""Full-batch training on the synthetic scenes, plus mIoU evaluation.

Training is deterministic: fixed dataset, full-batch steps, seeded init.
The optimizer is AdamW (decoupled weight decay, zero by default)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import NUM_CLASSES, SyntheticScene, batch_images, batch_targets
from .layers import ExecContext
from .matching import LossWeights, set_prediction_loss
from .model import SegModel

log = logging.getLogger("spike2")


class DivergenceError(RuntimeError):
    """Loss or a gradient stopped being finite."""


class AdamW:
    def __init__(self, params: dict[str, ad.Var], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {k}")
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    miou_history: list = field(default_factory=list)   # (step, miou)
    final_miou: float = 0.0
    baseline_miou: float = 0.0


def train_model(model: SegModel, scenes: list[SyntheticScene], steps: int,
                lr: float, weights: LossWeights = LossWeights(),
                weight_decay: float = 0.0, grad_clip: float = 1.0,
                eval_every: int = 0, on_step=None) -> TrainResult:
    images = batch_images(scenes)
    targets = batch_targets(scenes)
    model.calibrate(images)
    params = model.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    result = TrainResult(baseline_miou=all_background_miou(scenes))
    for step in range(steps):
        ctx = ExecContext(mode="train", bn_training=True)
        out = model.forward(images, ctx)
        loss, detail = set_prediction_loss(out.mask_logits, out.class_logits,
                                           targets, weights)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite loss at step {step}")
        ad.zero_grads(params)
        grads = ad.grad_map(loss, params)
        clip_grad_norm(grads, grad_clip)
        opt.step(grads)
        result.losses.append(float(loss.data))
        if eval_every and (step + 1) % eval_every == 0:
            miou = evaluate_miou(model, scenes)
            result.miou_history.append((step + 1, miou))
            log.info("step %d loss %.4f miou %.4f", step + 1, loss.data, miou)
        elif step % 20 == 0:
            log.info("step %d loss %.4f", step, loss.data)
        if on_step is not None:
            on_step(step, float(loss.data))
    result.final_miou = evaluate_miou(model, scenes)
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def semantic_map(pred_masks: np.ndarray, class_logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over sum_q p_q(class) * mask_q(pixel), the standard
    inference for per-mask classification models. Excludes the no-object
    class column."""
    z = class_logits - class_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p = p / p.sum(axis=-1, keepdims=True)
    p_obj = p[..., :NUM_CLASSES]                          # (B, N, K)
    scores = np.einsum("bnk,bnhw->bkhw", p_obj, pred_masks)
    return scores.argmax(axis=1)


def iou_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int = NUM_CLASSES):
    """(IoU or nan) per class; classes absent from both maps are excluded."""
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        p = pred == c
        t = truth == c
        union = np.logical_or(p, t).sum()
        if union:
            out[c] = np.logical_and(p, t).sum() / union
    return out


def miou(pred: np.ndarray, truth: np.ndarray) -> float:
    vals = iou_per_class(pred, truth)
    return float(np.nanmean(vals))


def evaluate_miou(model: SegModel, scenes: list[SyntheticScene],
                  mode: str = "train") -> float:
    """Dataset mIoU with per-class accumulation across all scenes."""
    images = batch_images(scenes)
    pred = model.predict(images, mode=mode)
    sem = semantic_map(pred.masks, pred.class_logits)
    inter = np.zeros(NUM_CLASSES)
    union = np.zeros(NUM_CLASSES)
    for i, s in enumerate(scenes):
        for c in range(NUM_CLASSES):
            p = sem[i] == c
            t = s.mask == c
            inter[c] += np.logical_and(p, t).sum()
            union[c] += np.logical_or(p, t).sum()
    present = union > 0
    return float((inter[present] / union[present]).mean())


def all_background_miou(scenes: list[SyntheticScene]) -> float:
    """The trivial predictor's score on this dataset: everything background."""
    inter = np.zeros(NUM_CLASSES)
    union = np.zeros(NUM_CLASSES)
    for s in scenes:
        for c in range(NUM_CLASSES):
            t = s.mask == c
            p = np.full_like(t, c == 0)
            inter[c] += np.logical_and(p, t).sum()
            union[c] += np.logical_or(p, t).sum()
    present = union > 0
    return float((inter[present] / union[present]).mean())
