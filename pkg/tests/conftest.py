import numpy as np
import pytest

from maskfuse.masks import BinaryMask, InstancePrediction, PredictionSet


def rect_mask(width, height, x0, y0, x1, y1):
    """Mask with pixels x0 <= x < x1, y0 <= y < y1 set."""
    bits = np.zeros((height, width), dtype=bool)
    bits[y0:y1, x0:x1] = True
    return BinaryMask(bits)


def pixels_mask(width, height, pixels):
    bits = np.zeros((height, width), dtype=bool)
    for x, y in pixels:
        bits[y, x] = True
    return BinaryMask(bits)


def random_mask(rng, width, height, density=None):
    p = rng.random() if density is None else density
    return BinaryMask(rng.random((height, width)) < p)


def random_crowd(rng, n=None, size=32, categories=(1, 2)):
    """Overlapping rectangles with distinct scores, clustered so IoUs are non-trivial."""
    n = int(rng.integers(2, 13)) if n is None else n
    preds = []
    scores = rng.permutation(np.linspace(0.1, 0.99, n))
    cx, cy = rng.integers(8, size - 8, size=2)
    for k in range(n):
        w, h = rng.integers(4, 14, size=2)
        x0 = int(np.clip(cx + rng.integers(-6, 7) - w // 2, 0, size - w))
        y0 = int(np.clip(cy + rng.integers(-6, 7) - h // 2, 0, size - h))
        m = rect_mask(size, size, x0, y0, x0 + w, y0 + h)
        cat = int(rng.choice(categories))
        preds.append(InstancePrediction(m, cat, float(scores[k])))
    return PredictionSet(0, size, size, tuple(preds))


def brute_counts(a, b):
    """Pixel-by-pixel intersection and union, no vectorisation."""
    inter = union = 0
    for y in range(a.height):
        for x in range(a.width):
            pa, pb = a.pixel(x, y), b.pixel(x, y)
            inter += pa and pb
            union += pa or pb
    return inter, union


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
