"""Deterministic toy instance-segmentation data and simulated noisy detectors.

Ground truth is a set of non-overlapping rectangles and ellipses per image
with a long-tailed category distribution.  Each simulated model sees every
ground-truth instance independently: it may miss it, predicts a mask whose
box edges are jittered by a few pixels, scores it by its true overlap plus
Gaussian noise, and may emit an extra lower-scored duplicate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coco_io import CocoDataset, ImageInfo
from .copypaste import Instance
from .errors import ContractViolation
from .masks import BinaryMask, InstancePrediction, PredictionSet, mask_iou
from .seeding import rng_for

SHAPES = ("rectangle", "ellipse")

_PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
     [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212]],
    dtype=np.int16,
)


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 200
    width: int = 256
    height: int = 256
    num_categories: int = 3
    long_tail_exponent: float = 1.0
    min_instances: int = 1
    max_instances: int = 6
    shapes: tuple = SHAPES
    min_size: int = 12
    max_size: int = 64
    num_models: int = 3
    jitter_px: float = 2.0
    drop_prob: float = 0.15
    duplicate_prob: float = 0.0
    score_noise: float = 0.1
    seed: int = 0
    render_images: bool = True

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ContractViolation("synthetic images must be at least 32x32")
        for name in ("drop_prob", "duplicate_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")
        if self.num_images < 0 or self.num_models < 0 or self.num_categories < 1:
            raise ContractViolation("counts must be non-negative and at least one category")
        if not 1 <= self.min_size <= self.max_size <= min(self.width, self.height):
            raise ContractViolation("need 1 <= min_size <= max_size <= image side")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ContractViolation("need 0 <= min_instances <= max_instances")
        if self.jitter_px < 0 or self.score_noise < 0:
            raise ContractViolation("noise levels must be non-negative")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ContractViolation(f"shapes must be drawn from {SHAPES}")

    def category_probs(self):
        ranks = np.arange(1, self.num_categories + 1, dtype=np.float64)
        p = ranks ** (-self.long_tail_exponent)
        return p / p.sum()


@dataclass(frozen=True)
class Shape:
    kind: str
    x0: float
    y0: float
    x1: float
    y1: float
    category_id: int

    def render(self, width, height):
        bits = np.zeros((height, width), dtype=bool)
        ix0, iy0 = max(int(np.floor(self.x0)), 0), max(int(np.floor(self.y0)), 0)
        ix1, iy1 = min(int(np.ceil(self.x1)), width), min(int(np.ceil(self.y1)), height)
        if ix0 >= ix1 or iy0 >= iy1:
            return BinaryMask(bits)
        px = np.arange(ix0, ix1) + 0.5
        py = np.arange(iy0, iy1) + 0.5
        if self.kind == "rectangle":
            sub = ((py >= self.y0) & (py < self.y1))[:, None] & ((px >= self.x0) & (px < self.x1))[None, :]
        else:
            cx, cy = (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2
            a, b = max((self.x1 - self.x0) / 2, 1e-9), max((self.y1 - self.y0) / 2, 1e-9)
            sub = ((px[None, :] - cx) / a) ** 2 + ((py[:, None] - cy) / b) ** 2 <= 1.0
        bits[iy0:iy1, ix0:ix1] = sub
        return BinaryMask(bits)

    def jittered(self, rng, amount):
        if amount == 0:
            return self
        d = rng.uniform(-amount, amount, size=4)
        x0, x1 = sorted((self.x0 + d[0], self.x1 + d[1]))
        y0, y1 = sorted((self.y0 + d[2], self.y1 + d[3]))
        return Shape(self.kind, x0, y0, x1, y1, self.category_id)


@dataclass
class SynthData:
    config: SynthConfig
    dataset: CocoDataset
    shapes: dict  # image id -> list[Shape]
    images: dict = field(default_factory=dict)  # image id -> HxWx3 uint8
    models: list = field(default_factory=list)  # per model: {image id: PredictionSet}


def _layout(config: SynthConfig, rng):
    probs = config.category_probs()
    n = int(rng.integers(config.min_instances, config.max_instances + 1))
    shapes = []
    margin = 2
    for _ in range(n):
        for _try in range(50):
            w = float(rng.integers(config.min_size, config.max_size + 1))
            h = float(rng.integers(config.min_size, config.max_size + 1))
            x0 = float(rng.uniform(0, config.width - w))
            y0 = float(rng.uniform(0, config.height - h))
            box = (x0, y0, x0 + w, y0 + h)
            if all(
                box[2] + margin <= s.x0 or s.x1 + margin <= box[0] or box[3] + margin <= s.y0 or s.y1 + margin <= box[1]
                for s in shapes
            ):
                kind = config.shapes[int(rng.integers(len(config.shapes)))]
                cat = int(rng.choice(config.num_categories, p=probs)) + 1
                shapes.append(Shape(kind, *box, cat))
                break
    return shapes


def _render_image(config, shapes, masks, rng):
    img = rng.integers(0, 60, size=(config.height, config.width, 3), dtype=np.int16)
    for shape, m in zip(shapes, masks):
        color = _PALETTE[(shape.category_id - 1) % len(_PALETTE)]
        noise = rng.integers(-20, 21, size=(int(m.bits.sum()), 3), dtype=np.int16)
        img[m.bits] = color + noise
    return np.clip(img, 0, 255).astype(np.uint8)


def simulate_model(config: SynthConfig, model_index, image_id, shapes, gt_masks):
    """Noisy predictions of one simulated detector for one image."""
    rng = rng_for(config.seed, "model", model_index, image_id)
    source = f"model{model_index}"
    preds = []
    for shape, gt in zip(shapes, gt_masks):
        if rng.random() < config.drop_prob:
            continue
        copies = 2 if rng.random() < config.duplicate_prob else 1
        for k in range(copies):
            m = shape.jittered(rng, config.jitter_px).render(config.width, config.height)
            if not m.bits.any():
                continue
            iou = mask_iou(m, gt)
            score = 0.3 + 0.6 * iou + (rng.normal(0.0, config.score_noise) if config.score_noise else 0.0)
            if k:
                score *= rng.uniform(0.3, 0.8)
            preds.append(InstancePrediction(m, shape.category_id, float(np.clip(score, 0.0, 1.0)), source))
    return PredictionSet(image_id, config.width, config.height, tuple(preds))


def synth(config: SynthConfig = SynthConfig()) -> SynthData:
    images_info, instances, all_shapes, pixels = {}, {}, {}, {}
    models = [dict() for _ in range(config.num_models)]
    ann_id = 1
    for image_id in range(1, config.num_images + 1):
        rng = rng_for(config.seed, "layout", image_id)
        shapes = _layout(config, rng)
        masks = [s.render(config.width, config.height) for s in shapes]
        keep = [k for k, m in enumerate(masks) if m.bits.any()]
        shapes, masks = [shapes[k] for k in keep], [masks[k] for k in keep]
        all_shapes[image_id] = shapes
        images_info[image_id] = ImageInfo(image_id, config.width, config.height, f"{image_id:06d}.png")
        insts = []
        for s, m in zip(shapes, masks):
            insts.append(Instance(m, s.category_id, ann_id))
            ann_id += 1
        instances[image_id] = tuple(insts)
        if config.render_images:
            pixels[image_id] = _render_image(config, shapes, masks, rng_for(config.seed, "pixels", image_id))
        for k in range(config.num_models):
            models[k][image_id] = simulate_model(config, k, image_id, shapes, masks)
    categories = [{"id": c, "name": f"class{c}"} for c in range(1, config.num_categories + 1)]
    ds = CocoDataset(images_info, categories, instances)
    return SynthData(config, ds, all_shapes, pixels, models)
