"""COCO-style mask mean average precision.

Differences from the full COCO evaluator: no crowd regions, no area ranges and
a single detection cap.  IoU thresholds are built as exact decimals
(``round(0.5 + 0.05 k, 2)``) so an IoU of exactly 3/5 matches at 0.60.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .masks import PredictionSet, cross_iou


def coco_iou_thresholds():
    return tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = field(default_factory=coco_iou_thresholds)
    max_dets: int = 100
    recall_points: int = 101

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        if not thr:
            raise ContractViolation("need at least one IoU threshold")
        if any(not 0.0 < t <= 1.0 for t in thr) or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ContractViolation("IoU thresholds must be strictly increasing in (0, 1]")
        if self.max_dets < 1:
            raise ContractViolation("max_dets must be at least 1")
        if self.recall_points < 2:
            raise ContractViolation("need at least two recall points")
        object.__setattr__(self, "iou_thresholds", thr)

    @property
    def recall_grid(self):
        n = self.recall_points - 1
        return np.array([k / n for k in range(n + 1)])


@dataclass(frozen=True)
class Match:
    """Outcome for one prediction at one threshold; ``gt_index`` is None for a false positive."""

    pred_index: int
    score: float
    gt_index: Optional[int]
    iou: float = 0.0

    @property
    def is_tp(self):
        return self.gt_index is not None


@dataclass
class ApReport:
    mAP: float
    per_category: dict
    per_threshold: dict
    table: dict  # category -> tuple of AP per threshold
    thresholds: tuple
    num_images: int = 0

    def to_dict(self):
        return {
            "mAP": self.mAP,
            "thresholds": list(self.thresholds),
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "per_category": {str(c): v for c, v in sorted(self.per_category.items())},
            "table": {str(c): list(v) for c, v in sorted(self.table.items())},
            "num_images": self.num_images,
        }

    def format_table(self):
        lines = [f"mAP = {100 * self.mAP:.3f}  ({self.num_images} images)"]
        head = "category " + " ".join(f"{t:>6.2f}" for t in self.thresholds) + "     AP"
        lines.append(head)
        for c in sorted(self.table):
            row = " ".join(f"{100 * v:6.2f}" for v in self.table[c])
            lines.append(f"{c:>8} {row} {100 * self.per_category[c]:6.2f}")
        return "\n".join(lines)


def _score_order(scores):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def match_from_ious(scores, ious, iou_thr):
    """Greedy matching given a (num_pred, num_gt) IoU matrix."""
    order = _score_order(scores)
    taken = np.zeros(ious.shape[1], dtype=bool)
    out = []
    for d in order:
        best, best_iou = None, -1.0
        for g in range(ious.shape[1]):
            if taken[g]:
                continue
            v = ious[d, g]
            if v >= iou_thr and v > best_iou:
                best, best_iou = g, v
        if best is not None:
            taken[best] = True
            out.append(Match(d, scores[d], best, float(best_iou)))
        else:
            out.append(Match(d, scores[d], None))
    return out


def match_predictions(preds, gts, iou_thr):
    """Greedy per-category matching for one image.

    ``preds`` is a sequence of predictions (``.mask``, ``.score``) of a single
    category and ``gts`` the ground-truth instances (``.mask``) of that
    category.  Predictions are visited by descending score; each takes the
    unmatched ground truth with the highest IoU at or above ``iou_thr``.
    """
    preds, gts = list(preds), list(gts)
    ious = cross_iou([p.mask for p in preds], [g.mask for g in gts])
    return match_from_ious([p.score for p in preds], ious, iou_thr)


def average_precision(matches, num_gt, config: EvalConfig = EvalConfig()):
    """Interpolated AP from per-detection outcomes pooled over a dataset.

    ``matches`` is an ordered sequence of ``(score, is_tp)`` pairs (or
    :class:`Match` objects); equal scores keep their given order.  Returns None
    when there is no ground truth for the category.
    """
    if num_gt == 0:
        return None
    pairs = [(m.score, m.is_tp) if isinstance(m, Match) else (float(m[0]), bool(m[1])) for m in matches]
    if not pairs:
        return 0.0
    order = _score_order([s for s, _ in pairs])
    tps = np.array([pairs[i][1] for i in order], dtype=np.float64)
    tp = np.cumsum(tps)
    fp = np.cumsum(1.0 - tps)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision at any recall >= current
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, config.recall_grid, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.sum() / len(sampled))


def _by_category(items):
    out = {}
    for item in items:
        out.setdefault(item.category_id, []).append(item)
    return out


def evaluate(
    predictions: Mapping[int, PredictionSet],
    ground_truth: Mapping[int, Sequence],
    config: EvalConfig = EvalConfig(),
) -> ApReport:
    """Score predictions against ground truth over every image in ``ground_truth``.

    ``ground_truth`` maps image id to instances exposing ``mask`` and
    ``category_id``.  Images absent from ``predictions`` count as having no
    detections.  Categories without ground truth are left out of the mean.
    """
    unknown = set(predictions) - set(ground_truth)
    if unknown:
        raise ContractViolation(f"predictions for images missing from ground truth: {sorted(unknown)[:5]}")
    thresholds = config.iou_thresholds
    num_gt = {}
    # per category, per threshold: list of (score, is_tp) in image order
    outcomes = {}

    for image_id in sorted(ground_truth):
        gts = _by_category(ground_truth[image_id])
        pset = predictions.get(image_id)
        preds = _by_category(pset.predictions) if pset is not None else {}
        for c, g in gts.items():
            num_gt[c] = num_gt.get(c, 0) + len(g)
        for c in sorted(set(gts) | set(preds)):
            p = preds.get(c, [])
            keep = _score_order([x.score for x in p])[: config.max_dets]
            p = [p[i] for i in keep]
            g = gts.get(c, [])
            ious = cross_iou([x.mask for x in p], [x.mask for x in g])
            scores = [x.score for x in p]
            per_thr = outcomes.setdefault(c, [[] for _ in thresholds])
            for t_idx, thr in enumerate(thresholds):
                ms = match_from_ious(scores, ious, thr)
                per_thr[t_idx].extend((m.score, m.is_tp) for m in ms)

    table = {}
    for c in sorted(num_gt):
        per_thr = outcomes.get(c, [[] for _ in thresholds])
        table[c] = tuple(average_precision(per_thr[t], num_gt[c], config) for t in range(len(thresholds)))
    if not table:
        raise ContractViolation("ground truth contains no instances")

    per_threshold = {t: math.fsum(table[c][k] for c in table) / len(table) for k, t in enumerate(thresholds)}
    per_category = {c: math.fsum(v) / len(v) for c, v in table.items()}
    mAP = math.fsum(per_threshold.values()) / len(per_threshold)
    return ApReport(mAP, per_category, per_threshold, table, thresholds, num_images=len(ground_truth))
