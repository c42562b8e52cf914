"""Offline copy-paste augmentation with effective-number class balancing.

Instances are cut out of the dataset into a source pool, then pasted with hard
compositing onto each image.  In ``simple`` mode every category present in the
pool is equally likely to be drawn; in ``balanced`` mode category ``c`` is
drawn with probability proportional to ``1 / E(n_c)`` where
``E(n) = (1 - beta**n) / (1 - beta)`` is the effective number of its
``n_c`` instances.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .fusion import hflip_mask, resize_mask
from .masks import BinaryMask, Mask, as_binary
from .seeding import rng_for

MODES = ("simple", "balanced")


@dataclass(frozen=True)
class Instance:
    mask: Mask
    category_id: int
    instance_id: int


@dataclass(frozen=True, eq=False)
class DatasetSample:
    """One image with its ground-truth instances.

    ``image`` is an ``(height, width, 3)`` uint8 array.
    """

    image: np.ndarray
    instances: tuple = ()
    image_id: int = 0
    file_name: Optional[str] = None

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ContractViolation(f"image must be HxWx3, got shape {img.shape}")
        insts = tuple(self.instances)
        h, w = img.shape[:2]
        ids = [i.instance_id for i in insts]
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"duplicate instance ids in sample {self.image_id}")
        for inst in insts:
            if (inst.mask.width, inst.mask.height) != (w, h):
                raise ContractViolation(
                    f"instance {inst.instance_id} mask is {inst.mask.width}x{inst.mask.height}, image is {w}x{h}"
                )
        object.__setattr__(self, "instances", insts)

    @property
    def width(self):
        return self.image.shape[1]

    @property
    def height(self):
        return self.image.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DatasetSample):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.file_name == other.file_name
            and np.array_equal(self.image, other.image)
            and self.instances == other.instances
        )


@dataclass(frozen=True)
class ClassStats:
    counts: Mapping[int, int]

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise ContractViolation("class counts must be non-negative")

    @classmethod
    def from_samples(cls, samples: Iterable[DatasetSample]):
        c = Counter()
        for s in samples:
            c.update(i.category_id for i in s.instances)
        return cls(dict(sorted(c.items())))


@dataclass(frozen=True)
class BalanceConfig:
    mode: str = "balanced"
    beta: float = 0.999
    pastes_per_image: int = 3
    min_visible_fraction: float = 0.1
    hflip_prob: float = 0.5
    # fraction of the crop's bounding box that must stay inside the image
    min_inside_fraction: float = 0.5
    # optional (low, high) uniform rescale range applied to each crop
    scale_range: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.beta < 1.0:
            raise ContractViolation("beta must lie in [0, 1)")
        if self.pastes_per_image < 0:
            raise ContractViolation("pastes_per_image must be non-negative")
        if not 0.0 <= self.min_visible_fraction <= 1.0:
            raise ContractViolation("min_visible_fraction must lie in [0, 1]")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ContractViolation("hflip_prob must lie in [0, 1]")
        if self.scale_range is not None and not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ContractViolation("scale_range must be 0 < low <= high")


@dataclass(frozen=True, eq=False)
class Crop:
    patch: np.ndarray  # (h, w, 3) uint8, pixels under and around the mask
    mask: BinaryMask  # tight: touches every side of its box
    category_id: int
    origin: int


@dataclass(frozen=True)
class SourcePool:
    crops: tuple = ()

    @cached_property
    def by_category(self):
        out = {}
        for c in self.crops:
            out.setdefault(c.category_id, []).append(c)
        return out


def effective_number(n: int, beta: float) -> float:
    if not 0.0 <= beta < 1.0:
        raise ContractViolation(f"beta must lie in [0, 1), got {beta}")
    if n < 0:
        raise ContractViolation("count must be non-negative")
    if n == 0:
        return 0.0
    if beta == 0.0:
        return 1.0
    # -expm1(n log beta) avoids cancellation in 1 - beta**n as beta -> 1
    return -math.expm1(n * math.log(beta)) / (1.0 - beta)


def class_sampling_weights(stats: ClassStats, beta: float) -> dict:
    """Normalised per-category weights proportional to ``1 / E(n_c)``."""
    inv = {c: (1.0 / effective_number(n, beta) if n > 0 else 0.0) for c, n in stats.counts.items()}
    total = math.fsum(inv.values())
    if total == 0:
        raise ContractViolation("class statistics contain no instances")
    return {c: v / total for c, v in inv.items()}


def uniform_weights(stats: ClassStats) -> dict:
    present = [c for c, n in stats.counts.items() if n > 0]
    if not present:
        raise ContractViolation("class statistics contain no instances")
    return {c: (1.0 / len(present) if n > 0 else 0.0) for c, n in stats.counts.items()}


def extract_crops(sample: DatasetSample) -> list:
    crops = []
    for inst in sample.instances:
        bits = as_binary(inst.mask).bits
        ys, xs = np.nonzero(bits)
        if ys.size == 0:
            continue
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        crops.append(
            Crop(
                patch=sample.image[y0:y1, x0:x1].copy(),
                mask=BinaryMask(bits[y0:y1, x0:x1]),
                category_id=inst.category_id,
                origin=sample.image_id,
            )
        )
    return crops


def build_source_pool(samples: Iterable[DatasetSample]) -> SourcePool:
    crops = []
    for s in samples:
        crops.extend(extract_crops(s))
    return SourcePool(tuple(crops))


def pool_weights(pool: SourcePool, weights: Mapping[int, float]) -> dict:
    """Restrict ``weights`` to categories that actually have crops, renormalised."""
    have = pool.by_category
    eligible = {c: w for c, w in weights.items() if w > 0 and c in have}
    total = math.fsum(eligible.values())
    if total == 0:
        raise ContractViolation("no crops available for any positively weighted category")
    return {c: w / total for c, w in sorted(eligible.items())}


def sample_instances(pool: SourcePool, weights: Mapping[int, float], k: int, seed=0) -> list:
    """Draw ``k`` crops: a category in proportion to ``weights``, then a crop uniformly within it."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    probs = pool_weights(pool, weights)
    cats = list(probs)
    p = np.array([probs[c] for c in cats])
    by_cat = pool.by_category
    out = []
    for c_idx in rng.choice(len(cats), size=k, p=p):
        members = by_cat[cats[c_idx]]
        out.append(members[rng.integers(len(members))])
    return out


def _prepare_crop(crop: Crop, config: BalanceConfig, rng):
    patch, mask = crop.patch, crop.mask
    if config.scale_range is not None:
        s = rng.uniform(*config.scale_range)
        h, w = mask.height, mask.width
        tw, th = max(1, int(round(w * s))), max(1, int(round(h * s)))
        ys = np.minimum(((np.arange(th) + 0.5) * (h / th)).astype(np.intp), h - 1)
        xs = np.minimum(((np.arange(tw) + 0.5) * (w / tw)).astype(np.intp), w - 1)
        patch = patch[np.ix_(ys, xs)]
        mask = resize_mask(mask, tw, th, "nearest")
    if rng.random() < config.hflip_prob:
        patch = patch[:, ::-1]
        mask = hflip_mask(mask)
    return patch, mask


def _place(ch, cw, height, width, min_inside, rng, tries=64):
    """Top-left offset keeping at least ``min_inside`` of the crop box in the image."""
    need = min_inside * ch * cw
    for _ in range(tries):
        y = int(rng.integers(-ch + 1, height))
        x = int(rng.integers(-cw + 1, width))
        inside_h = min(y + ch, height) - max(y, 0)
        inside_w = min(x + cw, width) - max(x, 0)
        if inside_h * inside_w >= need:
            return y, x
    # crop too large for the requirement: centre it
    return (height - ch) // 2, (width - cw) // 2


def paste(target: DatasetSample, crops: Sequence[Crop], config: BalanceConfig = BalanceConfig(), seed=0):
    """Paste ``crops`` onto ``target`` in order.

    Later pastes cover earlier ones.  Every instance already present (including
    earlier pastes) loses the covered pixels and is dropped once its visible
    area falls below ``min_visible_fraction`` of the area it started with.
    Crops that end up entirely outside the image are skipped.
    """
    return _paste(target, crops, config, seed)[0]


def _paste(target, crops, config, seed):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not crops:
        return target, []
    h, w = target.height, target.width
    image = target.image.copy()
    live = []  # [bits, category, instance_id, original_area]
    for inst in target.instances:
        bits = as_binary(inst.mask).bits.copy()
        live.append([bits, inst.category_id, inst.instance_id, int(bits.sum())])
    next_id = max((i.instance_id for i in target.instances), default=0) + 1
    pasted = []

    for crop in crops:
        patch, cmask = _prepare_crop(crop, config, rng)
        ch, cw = cmask.height, cmask.width
        y, x = _place(ch, cw, h, w, config.min_inside_fraction, rng)
        ty0, ty1, tx0, tx1 = max(y, 0), min(y + ch, h), max(x, 0), min(x + cw, w)
        if ty0 >= ty1 or tx0 >= tx1:
            continue
        sub = cmask.bits[ty0 - y : ty1 - y, tx0 - x : tx1 - x]
        if not sub.any():
            continue
        full = np.zeros((h, w), dtype=bool)
        full[ty0:ty1, tx0:tx1] = sub
        region = image[ty0:ty1, tx0:tx1]
        region[sub] = patch[ty0 - y : ty1 - y, tx0 - x : tx1 - x][sub]

        survivors = []
        for entry in live:
            entry[0] &= ~full
            if entry[0].sum() >= config.min_visible_fraction * entry[3]:
                survivors.append(entry)
        live = survivors
        live.append([full, crop.category_id, next_id, int(full.sum())])
        pasted.append(crop.category_id)
        next_id += 1

    instances = tuple(Instance(BinaryMask(b), c, i) for b, c, i, _ in live)
    return DatasetSample(image, instances, target.image_id, target.file_name), pasted


@dataclass
class AugmentReport:
    mode: str
    beta: float
    weights: dict
    before: dict
    after: dict
    pasted: dict
    pasted_total: int = 0
    sampled: dict = field(default_factory=dict)

    def share(self, category_id, which="pasted"):
        counts = getattr(self, which)
        total = sum(counts.values())
        return counts.get(category_id, 0) / total if total else 0.0

    def to_dict(self):
        key = lambda d: {str(k): v for k, v in sorted(d.items())}
        return {
            "mode": self.mode,
            "beta": self.beta,
            "weights": key(self.weights),
            "instances_before": key(self.before),
            "instances_after": key(self.after),
            "sampled": key(self.sampled),
            "pasted": key(self.pasted),
            "pasted_total": self.pasted_total,
        }


def iter_augmented(samples, pool: SourcePool, weights, config: BalanceConfig, seed=0, log=None):
    """Lazily paste sampled crops onto each sample of a (possibly streamed) iterable.

    Each sample draws from its own random stream keyed by ``(seed, image_id)``,
    so results do not depend on processing order.  When ``log`` is a dict it
    collects ``sampled`` and ``pasted`` category counters.
    """
    sampled, pasted = Counter(), Counter()
    if log is not None:
        log["sampled"], log["pasted"] = sampled, pasted
    for s in samples:
        if config.pastes_per_image == 0 or not pool.crops:
            yield s
            continue
        rng = rng_for(seed, "copy-paste", s.image_id)
        crops = sample_instances(pool, weights, config.pastes_per_image, rng)
        sampled.update(c.category_id for c in crops)
        new, cats = _paste(s, crops, config, rng)
        pasted.update(cats)
        yield new


def mode_weights(stats: ClassStats, config: BalanceConfig) -> dict:
    if config.mode == "balanced":
        return class_sampling_weights(stats, config.beta)
    return uniform_weights(stats)


def augment_dataset(samples, config: BalanceConfig = BalanceConfig(), seed=0):
    """Copy-paste augment a dataset; returns ``(augmented_samples, AugmentReport)``.

    The source pool and the category weights are fixed once from the whole
    input before any pasting happens.
    """
    samples = list(samples)
    stats = ClassStats.from_samples(samples)
    pool = build_source_pool(samples)
    weights = pool_weights(pool, mode_weights(stats, config)) if pool.crops else {}
    log = {}
    out = list(iter_augmented(samples, pool, weights, config, seed, log))
    after = ClassStats.from_samples(out).counts
    return out, make_report(config, weights, stats.counts, after, log)


def make_report(config, weights, before, after, log) -> AugmentReport:
    pasted = log.get("pasted", Counter())
    return AugmentReport(
        mode=config.mode,
        beta=config.beta,
        weights=dict(weights),
        before=dict(before),
        after=dict(sorted(after.items())),
        pasted=dict(sorted(pasted.items())),
        pasted_total=sum(pasted.values()),
        sampled=dict(sorted(log.get("sampled", Counter()).items())),
    )
