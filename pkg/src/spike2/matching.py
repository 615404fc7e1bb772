"""Set-prediction loss: Hungarian matching over class/mask/dice costs, then
cross-entropy on classes plus BCE and dice on the matched masks.

Costs are computed on detached values; the assignment is held fixed while
the loss differentiates through the matched predictions (the standard
treatment for bipartite-matching losses).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad


@dataclass(frozen=True)
class LossWeights:
    classes: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1  # CE weight of the background/no-object class


@dataclass
class SceneTargets:
    """Ground-truth segments of one image: integer class labels (M,) and
    binary masks (M, H, W)."""

    labels: np.ndarray
    masks: np.ndarray


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pairwise_cost(mask_logits: np.ndarray, class_logits: np.ndarray,
                  targets: SceneTargets, weights: LossWeights) -> np.ndarray:
    """(N, M) assignment cost between predictions and target segments."""
    n = mask_logits.shape[0]
    m = targets.labels.shape[0]
    probs = _softmax(class_logits)                       # (N, K+1)
    cost_cls = -probs[:, targets.labels]                 # (N, M)
    x = mask_logits.reshape(n, -1)                       # (N, P)
    t = targets.masks.reshape(m, -1)                     # (M, P)
    p = x.shape[1]
    # per-pair mean BCE, decomposed so it vectorizes: bce(x, t) =
    # mean(max(x,0) - x*t + log1p(exp(-|x|)))
    base = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).sum(axis=1)  # (N,)
    cost_bce = (base[:, None] - x @ t.T) / p
    s = _stable_sigmoid(x)
    inter = s @ t.T
    denom = s.sum(axis=1)[:, None] + t.sum(axis=1)[None, :]
    cost_dice = 1.0 - (2.0 * inter + 1.0) / (denom + 1.0)
    return weights.classes * cost_cls + weights.bce * cost_bce + weights.dice * cost_dice


def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost assignment (rows=predictions, cols=targets)."""
    rows, cols = linear_sum_assignment(cost)
    return np.asarray(rows), np.asarray(cols)


def match_batch(mask_logits: np.ndarray, class_logits: np.ndarray,
                targets: list[SceneTargets], weights: LossWeights):
    """Per-image assignments: list of (pred_idx, tgt_idx) pairs."""
    out = []
    for i, tg in enumerate(targets):
        if tg.labels.size == 0:
            out.append((np.array([], dtype=int), np.array([], dtype=int)))
            continue
        cost = pairwise_cost(mask_logits[i], class_logits[i], tg, weights)
        out.append(hungarian_match(cost))
    return out


def set_prediction_loss(mask_logits: ad.Var, class_logits: ad.Var,
                        targets: list[SceneTargets],
                        weights: LossWeights = LossWeights()):
    """Scalar training loss over a batch; returns (loss, detail dict)."""
    b, n = class_logits.data.shape[:2]
    num_classes = class_logits.data.shape[2] - 1
    assignments = match_batch(mask_logits.data, class_logits.data, targets, weights)

    cls_targets = np.full((b, n), num_classes, dtype=np.int64)  # default: no object
    rows_b, rows_n, tgt_masks = [], [], []
    for i, ((pred_idx, tgt_idx), tg) in enumerate(zip(assignments, targets)):
        for pi, ti in zip(pred_idx, tgt_idx):
            cls_targets[i, pi] = tg.labels[ti]
            rows_b.append(i)
            rows_n.append(pi)
            tgt_masks.append(tg.masks[ti])

    class_w = np.ones(num_classes + 1)
    class_w[num_classes] = weights.no_object
    flat_logits = ad.reshape(class_logits, (b * n, num_classes + 1))
    ce = ad.cross_entropy(flat_logits, cls_targets.reshape(-1), class_w)

    detail = {"matched": len(rows_b)}
    if rows_b:
        picked = ad.take_pairs(mask_logits, np.array(rows_b), np.array(rows_n))
        tgt = np.stack(tgt_masks).astype(np.float64)
        bce = ad.bce_with_logits(picked, tgt)
        flat = ad.reshape(picked, (len(rows_b), -1))
        dice = ad.dice_loss(flat, tgt.reshape(len(rows_b), -1))
        loss = ad.add(ad.mul(ce, weights.classes),
                      ad.add(ad.mul(bce, weights.bce), ad.mul(dice, weights.dice)))
        detail.update(ce=float(ce.data), bce=float(bce.data), dice=float(dice.data))
    else:
        loss = ad.mul(ce, weights.classes)
        detail.update(ce=float(ce.data), bce=0.0, dice=0.0)
    detail["loss"] = float(loss.data)
    return loss, detail
