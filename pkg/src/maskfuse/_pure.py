"""Pure-Python/numpy kernels, interchangeable with the compiled ``_ext`` module."""
import numpy as np

if hasattr(np, "bitwise_count"):
    _bitcount = np.bitwise_count
else:  # numpy < 2.0
    _BYTE_POP = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _bitcount(words):
        return _BYTE_POP[np.ascontiguousarray(words).view(np.uint8)].reshape(
            words.shape + (8,)
        ).sum(axis=-1, dtype=np.int64)


def rle_encode(flat):
    flat = np.asarray(flat, dtype=bool)
    n = flat.shape[0]
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [n]))
    counts = np.diff(bounds).astype(np.int64)
    if n and flat[0]:
        counts = np.concatenate(([0], counts))
    return counts


def rle_decode(counts, n):
    counts = np.asarray(counts, dtype=np.int64)
    values = np.zeros(len(counts), dtype=np.uint8)
    values[1::2] = 1
    return np.repeat(values, counts).astype(np.uint8, copy=False)[:n]


def rle_to_string(counts):
    out = bytearray()
    counts = [int(c) for c in counts]
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(c + 48)
    return bytes(out)


def rle_from_string(s):
    s = bytes(s)
    n = len(s)
    cnts = []
    p = 0
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise ValueError("truncated RLE string")
            c = s[p] - 48
            if c < 0 or c > 63:
                raise ValueError(f"invalid RLE character at offset {p}")
            if k > 12:
                raise ValueError(f"RLE value overflow at offset {p}")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(cnts) > 2:
            x += cnts[-2]
        cnts.append(x)
    return np.array(cnts, dtype=np.int64)


def pairwise_intersections(packed):
    packed = np.asarray(packed, dtype=np.uint64)
    n = packed.shape[0]
    out = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        row = _bitcount(packed[i] & packed[i:]).sum(axis=1, dtype=np.int64)
        out[i, i:] = row
        out[i:, i] = row
    return out


def cross_intersections(a, b):
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.int64)
    for i in range(a.shape[0]):
        out[i] = _bitcount(a[i] & b).sum(axis=1, dtype=np.int64)
    return out


def popcounts(packed):
    packed = np.asarray(packed, dtype=np.uint64)
    return _bitcount(packed).sum(axis=1, dtype=np.int64)
