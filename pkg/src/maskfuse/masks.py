"""Mask representations, the COCO run-length codec and exact overlap arithmetic.

Addressing convention used throughout the package: ``x`` grows to the right,
``y`` grows downward, origin at the top-left pixel.  Dense bits are stored as
a ``(height, width)`` boolean array, so pixel ``(x, y)`` is ``bits[y, x]``.
Run-length counts scan column-major (down each column, then to the next
column) and always start with a run of background pixels, which may be zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from ._backend import kernels
from .errors import ContractViolation, MalformedRLE

__all__ = [
    "BinaryMask",
    "RleMask",
    "Mask",
    "InstancePrediction",
    "PredictionSet",
    "rle_encode",
    "rle_decode",
    "as_binary",
    "mask_area",
    "intersection_union",
    "mask_iou",
    "iou_matrix",
    "cross_iou",
    "pack_masks",
]


def _readonly(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Dense instance bitmap; ``bits[y, x]`` is the pixel at column x, row y."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ContractViolation(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        object.__setattr__(self, "bits", _readonly(bits))

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def size(self):
        return (self.height, self.width)

    def pixel(self, x, y):
        return bool(self.bits[y, x])

    @cached_property
    def packed(self):
        return pack_masks([self.bits])[0]

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.bits.shape, np.packbits(self.bits).tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={int(self.bits.sum())})"


@dataclass(frozen=True, eq=False)
class RleMask:
    """Uncompressed COCO run-length mask.

    ``counts`` alternates background/foreground run lengths over the
    column-major scan; only the first run may be zero.
    """

    height: int
    width: int
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        h, w = int(self.height), int(self.width)
        if h < 1 or w < 1:
            raise MalformedRLE(f"RLE size must be at least 1x1, got {h}x{w}")
        counts = np.array(self.counts, dtype=np.int64, copy=True).reshape(-1)
        if counts.size == 0:
            raise MalformedRLE("RLE counts are empty")
        if (counts < 0).any():
            raise MalformedRLE("RLE counts must be non-negative")
        if counts.size > 1 and (counts[1:] == 0).any():
            raise MalformedRLE("zero-length run after the first position")
        total = int(counts.sum())
        if total != h * w:
            raise MalformedRLE(f"RLE counts sum to {total}, expected {h}x{w}={h * w}")
        object.__setattr__(self, "height", h)
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "counts", _readonly(counts))

    @property
    def size(self):
        return (self.height, self.width)

    def area(self):
        return int(self.counts[1::2].sum())

    def __eq__(self, other):
        if not isinstance(other, RleMask):
            return NotImplemented
        return self.size == other.size and np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash((self.size, self.counts.tobytes()))


Mask = Union[BinaryMask, RleMask]


def rle_encode(mask: BinaryMask) -> RleMask:
    flat = np.ascontiguousarray(mask.bits.ravel(order="F"), dtype=np.uint8)
    return RleMask(mask.height, mask.width, kernels.rle_encode(flat))


def rle_decode(rle: RleMask) -> BinaryMask:
    n = rle.height * rle.width
    flat = kernels.rle_decode(np.ascontiguousarray(rle.counts, dtype=np.int64), n)
    return BinaryMask(np.asarray(flat, dtype=bool).reshape((rle.height, rle.width), order="F"))


def as_binary(mask: Mask) -> BinaryMask:
    if isinstance(mask, BinaryMask):
        return mask
    if isinstance(mask, RleMask):
        return rle_decode(mask)
    raise TypeError(f"expected BinaryMask or RleMask, got {type(mask).__name__}")


def mask_area(mask: Mask) -> int:
    if isinstance(mask, RleMask):
        return mask.area()
    return int(np.count_nonzero(mask.bits))


def pack_masks(bit_arrays):
    """Pack boolean grids of one resolution into rows of uint64 words.

    Tail padding bits are zero, so popcounts over the words are exact.
    """
    arrs = [np.asarray(b, dtype=bool) for b in bit_arrays]
    if not arrs:
        return np.zeros((0, 1), dtype=np.uint64)
    flat = np.stack([a.reshape(-1) for a in arrs])
    packed = np.packbits(flat, axis=1)
    pad = (-packed.shape[1]) % 8
    if pad:
        packed = np.pad(packed, ((0, 0), (0, pad)))
    return np.ascontiguousarray(packed).view(np.uint64)


def _check_same_size(masks):
    sizes = {(m.height, m.width) for m in masks}
    if len(sizes) > 1:
        raise ContractViolation(f"masks have different resolutions: {sorted(sizes)}")


def _packed_rows(masks):
    # BinaryMask caches its packed words; RleMask is decoded on the fly so that
    # file-backed prediction sets never hold dense copies longer than a call.
    rows = [m.packed if isinstance(m, BinaryMask) else None for m in masks]
    missing = [i for i, r in enumerate(rows) if r is None]
    if missing:
        extra = pack_masks([rle_decode(masks[i]).bits for i in missing])
        for i, row in zip(missing, extra):
            rows[i] = row
    if not rows:
        return np.zeros((0, 1), dtype=np.uint64)
    return np.ascontiguousarray(np.stack(rows))


def intersection_union(a: Mask, b: Mask) -> tuple[int, int]:
    _check_same_size([a, b])
    inter = int(kernels.cross_intersections(_packed_rows([a]), _packed_rows([b]))[0, 0])
    return inter, mask_area(a) + mask_area(b) - inter


def mask_iou(a: Mask, b: Mask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    inter, union = intersection_union(a, b)
    return inter / union if union else 0.0


def _ratio(inter, areas_a, areas_b):
    union = areas_a[:, None] + areas_b[None, :] - inter
    out = np.zeros(inter.shape, dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_matrix(preds) -> np.ndarray:
    """Pairwise IoU of a :class:`PredictionSet` (or a plain mask sequence)."""
    masks = [p.mask for p in preds.predictions] if isinstance(preds, PredictionSet) else list(preds)
    _check_same_size(masks)
    packed = _packed_rows(masks)
    inter = kernels.pairwise_intersections(packed)
    areas = np.diagonal(inter).copy()
    return _ratio(inter, areas, areas)


def cross_iou(a_masks: Sequence[Mask], b_masks: Sequence[Mask]) -> np.ndarray:
    """IoU of every mask in ``a_masks`` against every mask in ``b_masks``."""
    a_masks, b_masks = list(a_masks), list(b_masks)
    if not a_masks or not b_masks:
        return np.zeros((len(a_masks), len(b_masks)), dtype=np.float64)
    _check_same_size(a_masks + b_masks)
    pa, pb = _packed_rows(a_masks), _packed_rows(b_masks)
    inter = kernels.cross_intersections(pa, pb)
    return _ratio(inter, kernels.popcounts(pa), kernels.popcounts(pb))


@dataclass(frozen=True)
class InstancePrediction:
    mask: Mask
    category_id: int
    score: float
    source: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractViolation(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class PredictionSet:
    """All predicted instances for one image."""

    image_id: int
    width: int
    height: int
    predictions: tuple = ()

    def __post_init__(self):
        preds = tuple(self.predictions)
        object.__setattr__(self, "predictions", preds)
        for p in preds:
            if (p.mask.width, p.mask.height) != (self.width, self.height):
                raise ContractViolation(
                    f"prediction mask {p.mask.width}x{p.mask.height} does not match "
                    f"image {self.image_id} at {self.width}x{self.height}"
                )

    def __len__(self):
        return len(self.predictions)

    def __iter__(self):
        return iter(self.predictions)

    def with_predictions(self, predictions):
        return PredictionSet(self.image_id, self.width, self.height, tuple(predictions))
