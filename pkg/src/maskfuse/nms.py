"""Score-decay (Matrix) NMS over mask predictions, plus a greedy hard-NMS reference.

For predictions sorted by descending score, each one is decayed by how much
it overlaps any higher-scored prediction, discounted by how suppressed that
higher-scored prediction already is itself::

    decay_j = min_{i < j} f(iou_ij) / f(iou_max_i),   iou_max_i = max_{k < i} iou_ki

with ``f(x) = 1 - x`` (linear) or ``f(x) = exp(-x**2 / sigma)`` (gaussian).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ContractViolation
from .masks import PredictionSet, iou_matrix

KERNELS = ("linear", "gaussian")
CATEGORY_MODES = ("per-category", "agnostic")

# Floor for the linear-kernel denominator; an exact duplicate above item i
# would otherwise make f(iou_max_i) zero.
LINEAR_EPS = 1e-6


@dataclass(frozen=True)
class NmsConfig:
    kernel: str = "gaussian"
    sigma: float = 2.0
    score_threshold: float = 0.05
    max_keep: int = 100
    category_mode: str = "per-category"
    pre_top_k: Optional[int] = None

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ContractViolation(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.category_mode not in CATEGORY_MODES:
            raise ContractViolation(f"unknown category mode {self.category_mode!r}")
        if not self.sigma > 0:
            raise ContractViolation("sigma must be positive")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ContractViolation("score_threshold must lie in [0, 1]")
        if self.max_keep < 1:
            raise ContractViolation("max_keep must be at least 1")
        if self.pre_top_k is not None and self.pre_top_k < 1:
            raise ContractViolation("pre_top_k must be at least 1 when set")


def decay_factors(scores, ious, config: NmsConfig = NmsConfig()) -> np.ndarray:
    """Per-prediction decay multipliers for score-sorted inputs.

    ``scores`` must be sorted in descending order and ``ious`` is the matching
    symmetric pairwise IoU matrix.  The first factor is always exactly 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    n = scores.shape[0]
    if ious.shape != (n, n):
        raise ContractViolation(f"IoU matrix shape {ious.shape} does not match {n} scores")
    if n > 1 and np.any(np.diff(scores) > 0):
        raise ContractViolation("scores must be sorted in descending order")
    if n == 0:
        return np.zeros(0)

    upper = np.triu(ious, k=1)
    # column max: strongest overlap each item has with anything scored above it
    iou_max = upper.max(axis=0)
    if config.kernel == "gaussian":
        ratio = np.exp((iou_max[:, None] ** 2 - upper**2) / config.sigma)
    else:
        denom = np.maximum(1.0 - iou_max, LINEAR_EPS)
        ratio = (1.0 - upper) / denom[:, None]
    above = np.triu(np.ones((n, n), dtype=bool), k=1)
    ratio = np.where(above, ratio, np.inf)
    decay = ratio.min(axis=0)
    decay[0] = 1.0
    return np.clip(decay, 0.0, 1.0)


def _sort_order(preds):
    # ties: category id, then input position
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].category_id, i))


def matrix_nms(pset: PredictionSet, config: NmsConfig = NmsConfig()) -> PredictionSet:
    preds = list(pset.predictions)
    order = _sort_order(preds)
    if config.pre_top_k is not None:
        order = order[: config.pre_top_k]
    if not order:
        return pset.with_predictions(())

    ordered = [preds[i] for i in order]
    scores = np.array([p.score for p in ordered], dtype=np.float64)
    ious = iou_matrix([p.mask for p in ordered])
    decay = np.ones(len(ordered))
    if config.category_mode == "agnostic":
        decay = decay_factors(scores, ious, config)
    else:
        cats = np.array([p.category_id for p in ordered])
        for c in np.unique(cats):
            idx = np.flatnonzero(cats == c)
            decay[idx] = decay_factors(scores[idx], ious[np.ix_(idx, idx)], config)

    new_scores = scores * decay
    kept = [k for k in range(len(ordered)) if new_scores[k] >= config.score_threshold]
    kept.sort(key=lambda k: (-new_scores[k], ordered[k].category_id, order[k]))
    kept = kept[: config.max_keep]
    return pset.with_predictions(
        replace(ordered[k], score=float(min(max(new_scores[k], 0.0), 1.0))) for k in kept
    )


def greedy_nms_oracle(pset: PredictionSet, iou_threshold: float, per_category=False) -> PredictionSet:
    """Classical hard NMS: walk by descending score, drop anything overlapping a keeper."""
    preds = list(pset.predictions)
    order = _sort_order(preds)
    ious = iou_matrix([preds[i].mask for i in order]) if order else np.zeros((0, 0))
    kept = []
    for pos, i in enumerate(order):
        suppressed = any(
            ious[kpos, pos] > iou_threshold
            and (not per_category or preds[order[kpos]].category_id == preds[i].category_id)
            for kpos in kept
        )
        if not suppressed:
            kept.append(pos)
    return pset.with_predictions(preds[order[p]] for p in kept)
