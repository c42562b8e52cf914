"""Test-time-augmentation inversion, multi-source pooling and ensemble fusion.

Predictions made on a resized and/or horizontally flipped copy of an image
are mapped back to the original geometry (un-flip first, then resize), pooled
with predictions from other transforms or other models, and fused with
:func:`maskfuse.nms.matrix_nms`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .masks import BinaryMask, Mask, PredictionSet, as_binary
from .nms import NmsConfig, matrix_nms

RESIZE_METHODS = ("nearest", "bilinear")


def _round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class TtaTransform:
    """Resize by ``scale`` (or to an explicit size), optionally flipped along x."""

    scale: float = 1.0
    hflip: bool = False
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ContractViolation("TTA scale must be positive")
        if (self.width is None) != (self.height is None):
            raise ContractViolation("explicit target size needs both width and height")
        if self.width is not None and (self.width < 1 or self.height < 1):
            raise ContractViolation("explicit target size must be at least 1x1")

    def transformed_size(self, width, height):
        if self.width is not None:
            return self.width, self.height
        return (max(1, _round_half_up(width * self.scale)), max(1, _round_half_up(height * self.scale)))

    def is_identity(self, width, height):
        return not self.hflip and self.transformed_size(width, height) == (width, height)

    @property
    def tag(self):
        if self.width is not None:
            base = f"{self.width}x{self.height}"
        else:
            base = f"s{self.scale:g}"
        return base + ("+flip" if self.hflip else "")

    def forward_mask(self, mask: Mask, method="nearest") -> BinaryMask:
        """Map an original-geometry mask into the transformed image."""
        tw, th = self.transformed_size(mask.width, mask.height)
        out = resize_mask(as_binary(mask), tw, th, method)
        return hflip_mask(out) if self.hflip else out


@dataclass(frozen=True)
class TtaPrediction:
    predictions: PredictionSet
    transform: TtaTransform
    original_width: int
    original_height: int

    def __post_init__(self):
        expected = self.transform.transformed_size(self.original_width, self.original_height)
        got = (self.predictions.width, self.predictions.height)
        if got != expected:
            raise ContractViolation(
                f"TTA predictions are {got[0]}x{got[1]} but transform {self.transform.tag} "
                f"of {self.original_width}x{self.original_height} gives {expected[0]}x{expected[1]}"
            )


@dataclass(frozen=True)
class CalibrationConfig:
    """Per-source score multipliers; sources not listed keep their raw scores."""

    multipliers: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for source, m in self.multipliers.items():
            if not m > 0:
                raise ContractViolation(f"multiplier for {source!r} must be positive, got {m}")

    def factor(self, source):
        return self.multipliers.get(source, 1.0) if source is not None else 1.0


def _axis_weights(src, dst):
    # pixel-centre alignment, edges clamped (align_corners=False convention)
    coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coords - lo


def resize_mask(mask: BinaryMask, target_w, target_h, method="bilinear") -> BinaryMask:
    """Resize a binary mask; ``bilinear`` interpolates the 0/1 field and keeps values >= 0.5."""
    if target_w < 1 or target_h < 1:
        raise ContractViolation("resize target must be at least 1x1")
    if method not in RESIZE_METHODS:
        raise ContractViolation(f"unknown resize method {method!r}")
    bits = mask.bits
    h, w = bits.shape
    if (w, h) == (target_w, target_h):
        return mask
    if method == "nearest":
        ys = np.minimum(((np.arange(target_h) + 0.5) * (h / target_h)).astype(np.intp), h - 1)
        xs = np.minimum(((np.arange(target_w) + 0.5) * (w / target_w)).astype(np.intp), w - 1)
        return BinaryMask(bits[np.ix_(ys, xs)])

    field_ = bits.astype(np.float64)
    y0, y1, wy = _axis_weights(h, target_h)
    x0, x1, wx = _axis_weights(w, target_w)
    rows = field_[y0] * (1.0 - wy)[:, None] + field_[y1] * wy[:, None]
    out = rows[:, x0] * (1.0 - wx)[None, :] + rows[:, x1] * wx[None, :]
    return BinaryMask(out >= 0.5)


def hflip_mask(mask: BinaryMask) -> BinaryMask:
    return BinaryMask(mask.bits[:, ::-1])


def _tagged(source, tag):
    return tag if source is None else f"{source}/{tag}"


def invert_predictions(t: TtaPrediction, method="bilinear") -> PredictionSet:
    """Bring TTA predictions back to the original image geometry.

    An identity transform returns the input set untouched; otherwise each
    prediction's source tag is suffixed with the transform tag.
    """
    w, h = t.original_width, t.original_height
    src = t.predictions
    if t.transform.is_identity(w, h):
        return src
    out = []
    for p in src.predictions:
        m = as_binary(p.mask)
        if t.transform.hflip:
            m = hflip_mask(m)
        m = resize_mask(m, w, h, method)
        out.append(replace(p, mask=m, source=_tagged(p.source, t.transform.tag)))
    return PredictionSet(src.image_id, w, h, tuple(out))


def pool(sets: Sequence[PredictionSet], calibration: CalibrationConfig = CalibrationConfig()) -> PredictionSet:
    """Concatenate prediction sets in order, scaling scores per source tag."""
    sets = list(sets)
    if not sets:
        raise ContractViolation("pool needs at least one prediction set")
    first = sets[0]
    for s in sets[1:]:
        if (s.image_id, s.width, s.height) != (first.image_id, first.width, first.height):
            raise ContractViolation(
                f"cannot pool image {s.image_id} ({s.width}x{s.height}) with "
                f"image {first.image_id} ({first.width}x{first.height})"
            )
    merged = []
    for s in sets:
        for p in s.predictions:
            k = calibration.factor(p.source)
            merged.append(p if k == 1.0 else replace(p, score=min(max(p.score * k, 0.0), 1.0)))
    return first.with_predictions(merged)


def tta_merge(
    preds: Sequence[TtaPrediction],
    nms: NmsConfig = NmsConfig(),
    method="bilinear",
    calibration: CalibrationConfig = CalibrationConfig(),
) -> PredictionSet:
    preds = list(preds)
    if not preds:
        raise ContractViolation("tta_merge needs at least one input")
    geom = {(t.original_width, t.original_height, t.predictions.image_id) for t in preds}
    if len(geom) != 1:
        raise ContractViolation(f"TTA inputs disagree on original geometry: {sorted(geom)}")
    return matrix_nms(pool([invert_predictions(t, method) for t in preds], calibration), nms)


def ensemble(
    model_outputs: Sequence[PredictionSet],
    calibration: CalibrationConfig = CalibrationConfig(),
    nms: NmsConfig = NmsConfig(),
) -> PredictionSet:
    """Pool the outputs of several models for one image and fuse them with Matrix NMS."""
    return matrix_nms(pool(model_outputs, calibration), nms)
