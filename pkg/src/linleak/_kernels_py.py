"""Pure-numpy fallback for the compiled kernels (same signatures, same bits)."""

import numpy as np

BACKEND = "numpy"

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_CHUNK = 1 << 20


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def _shift_for(modulus):
    return np.uint64(64 - int(modulus).bit_length())


def coo_matmul_t(rows, cols, vals, xt, nrows):
    out = np.zeros((nrows, xt.shape[1]))
    if len(vals) == 0:
        return out
    prod = xt[cols] * vals[:, None]
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    out[rows[starts]] = np.add.reduceat(prod, starts, axis=0)
    return out


def coo_sddmm_t(rows, cols, dt, xt):
    return np.einsum("eb,eb->e", dt[rows], xt[cols])


def _stream_chunk(seed, start, n, modulus, shift):
    with np.errstate(over="ignore"):
        ctr = np.arange(start + 1, start + 1 + n, dtype=np.uint64)
        r = _mix(np.uint64(seed) + ctr * GOLDEN) >> shift
    m = np.uint64(modulus)
    r[r >= m] -= m
    return r


def prg_fill(seed, n, modulus, offset=0):
    shift = _shift_for(modulus)
    out = np.empty(n, dtype=np.uint64)
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        out[lo:hi] = _stream_chunk(seed, offset + lo, hi - lo, modulus, shift)
    return out


def prg_accumulate(out, seed, modulus, subtract, offset=0):
    shift = _shift_for(modulus)
    m = np.uint64(modulus)
    n = out.shape[0]
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        r = _stream_chunk(seed, offset + lo, hi - lo, modulus, shift)
        seg = out[lo:hi]
        if subtract:
            seg += m - r
        else:
            seg += r
        seg[seg >= m] -= m


def prg_mask(out, seeds, signs, modulus, offset=0):
    for seed, sign in zip(seeds, signs):
        prg_accumulate(out, int(seed), modulus, sign < 0, offset)
