"""Compare the compiled kernels with their numpy fallbacks.

Run ``python -m maskfuse.bench``; prints one line per kernel with the best
of several repeats for each backend and the speed-up.
"""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import _pure
from .masks import pack_masks


def _best(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _blobs(size, rng):
    """A few overlapping ellipses, the typical shape of an instance mask."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    bits = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0, size, 2)
        a, b = rng.uniform(size / 16, size / 3, 2)
        bits |= ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    return bits


def _cases(size, count, rng):
    bits = [_blobs(size, rng) for _ in range(count)]
    flats = [np.ascontiguousarray(b.ravel(order="F"), dtype=np.uint8) for b in bits]
    counts = [_pure.rle_encode(f) for f in flats]
    strings = [_pure.rle_to_string(c) for c in counts]
    packed = pack_masks(bits)
    return {
        "rle_encode": lambda k: [k.rle_encode(f) for f in flats],
        "rle_decode": lambda k: [k.rle_decode(c, size * size) for c in counts],
        "rle_to_string": lambda k: [k.rle_to_string(c) for c in counts],
        "rle_from_string": lambda k: [k.rle_from_string(s) for s in strings],
        "pairwise_intersections": lambda k: k.pairwise_intersections(packed),
    }


def run(size=256, count=64, repeats=3, seed=0):
    try:
        from . import _ext
    except ImportError:
        _ext = None
    cases = _cases(size, count, np.random.default_rng(seed))
    rows = []
    for name, fn in cases.items():
        pure = _best(lambda: fn(_pure), repeats)
        ext = _best(lambda: fn(_ext), repeats) if _ext is not None else None
        rows.append((name, pure, ext))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m maskfuse.bench", description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256, help="mask side length")
    ap.add_argument("--count", type=int, default=64, help="masks per batch")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)
    rows = run(args.size, args.count, args.repeats)
    print(f"{args.count} blob masks of {args.size}x{args.size}, best of {args.repeats}")
    print(f"{'kernel':<24} {'python ms':>10} {'cython ms':>10} {'speed-up':>9}")
    for name, pure, ext in rows:
        if ext is None:
            print(f"{name:<24} {1e3 * pure:10.2f} {'n/a':>10} {'n/a':>9}")
        else:
            print(f"{name:<24} {1e3 * pure:10.2f} {1e3 * ext:10.2f} {pure / ext:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
