"""Pure numpy implementations of the hot kernels.

Selected by :mod:`xnor_forge.kernels` when the compiled extension is missing
or ``XNOR_FORGE_PURE`` is set. Results are bit-identical to ``_ckernels``.
"""
import numpy as np

BACKEND = "numpy"

_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)

# bound the (rows x cols x words) temporary in xnor_dot_matrix
_CHUNK_WORDS = 1 << 20


def _tail_mask(nbits):
    r = nbits % 64
    return _ALL_ONES if r == 0 else np.uint64((1 << r) - 1)


def popcount(words):
    return int(np.bitwise_count(np.asarray(words, dtype=np.uint64)).sum())


def xnor_dot_matrix(a, b, nbits):
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    nw = a.shape[1]
    if b.shape[1] != nw:
        raise ValueError("word count mismatch")
    if nw != (nbits + 63) // 64:
        raise ValueError("nbits inconsistent with word count")
    m, k = a.shape[0], b.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    if nw == 0:
        out[:] = 0
        return out
    mask = np.full(nw, _ALL_ONES, dtype=np.uint64)
    mask[-1] = _tail_mask(nbits)
    step = max(1, _CHUNK_WORDS // max(1, k * nw))
    for start in range(0, m, step):
        block = ~(a[start:start + step, None, :] ^ b[None, :, :]) & mask
        p = np.bitwise_count(block).sum(axis=2, dtype=np.int64)
        out[start:start + step] = 2 * p - nbits
    return out


def conv_first_accumulate(x, signs):
    x = np.ascontiguousarray(x, dtype=np.float64)
    signs = np.asarray(signs, dtype=np.int8)
    h, w, c_in = x.shape
    f, c_w, kh, kw = signs.shape
    if c_w != c_in:
        raise ValueError("channel mismatch")
    oh, ow = h - kh + 1, w - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than input")
    acc = np.zeros((oh, ow, f), dtype=np.float64)
    positive = signs > 0
    # one tap at a time in (channel, row, col) order; keeps the summation
    # order identical to the compiled kernel and the hardware co-simulation
    for c in range(c_in):
        for ky in range(kh):
            for kx in range(kw):
                tap = x[ky:ky + oh, kx:kx + ow, c][:, :, None]
                acc = np.where(positive[:, c, ky, kx], acc + tap, acc - tap)
    return acc
