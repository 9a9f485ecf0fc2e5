"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def bfp_block_oracle(values, mantissa_bits: int, exponent_bits: int):
    """Encode one block with exact rational arithmetic.

    Returns (biased exponent, signs, mantissas).  Both candidate mantissas
    around each exact scaled value are enumerated and the nearer one wins,
    the even one on a tie.
    """
    bias = 2 ** (exponent_bits - 1) - 1
    exact = [Fraction(v) for v in values]
    peak = max(abs(v) for v in exact)
    if peak == 0:
        return 0, [0] * len(values), [0] * len(values)
    e = 0
    while Fraction(2) ** e > peak:
        e -= 1
    while Fraction(2) ** (e + 1) <= peak:
        e += 1
    if e < 1 - bias:
        return 0, [0] * len(values), [0] * len(values)
    scale = Fraction(2) ** (mantissa_bits - 1 - e)
    signs, mants = [], []
    for v in exact:
        s = abs(v) * scale
        lo = math.floor(s)
        candidates = [lo, lo + 1]
        best = min(candidates, key=lambda m: (abs(s - m), m % 2))
        mants.append(min(best, 2**mantissa_bits - 1))
        signs.append(1 if v < 0 else 0)
    return e + bias, signs, mants


def round_to_fraction_bits(x: float, k: int) -> float:
    """Nearest-even double with at most ``k`` fraction bits, by enumeration."""
    if x == 0 or not math.isfinite(x):
        return x
    q = Fraction(x)
    mag = abs(q)
    e = 0
    while Fraction(2) ** e > mag:
        e -= 1
    while Fraction(2) ** (e + 1) <= mag:
        e += 1
    step = Fraction(2) ** (e - k)
    lo = math.floor(mag / step)
    best = min((lo, lo + 1), key=lambda m: (abs(mag / step - m), m % 2))
    out = float(best * step)
    return -out if q < 0 else out


def truncate_significant_bits(x: float, bits: int) -> float:
    """``x`` truncated toward zero to ``bits`` significant bits."""
    if x == 0:
        return x
    m, e = math.frexp(abs(x))
    kept = math.floor(m * 2**bits)
    return math.copysign(math.ldexp(kept, e - bits), x)


def matmul_python(a, b) -> np.ndarray:
    """Plain nested loops; each output accumulates over k in increasing order."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def bf16_bits_round(x: np.ndarray) -> np.ndarray:
    """Round doubles to 8 significant bits by integer surgery on the bit pattern."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    bits = x.view(np.uint64).copy()
    drop = 52 - 7
    half = np.uint64(1) << np.uint64(drop - 1)
    lsb = (bits >> np.uint64(drop)) & np.uint64(1)
    bits = bits + half - np.uint64(1) + lsb
    bits &= ~((np.uint64(1) << np.uint64(drop)) - np.uint64(1))
    return bits.view(np.float64)


def lsd_loop(a, b, frame: int, hop: int, eps: float = 1e-10) -> float:
    """Log-spectral distance computed frame by frame and bin by bin."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    win = [0.5 - 0.5 * math.cos(2 * math.pi * n / frame) for n in range(frame)]
    per_frame = []
    start = 0
    while start + frame <= a.size:
        fa = np.fft.rfft([a[start + n] * win[n] for n in range(frame)])
        fb = np.fft.rfft([b[start + n] * win[n] for n in range(frame)])
        acc = 0.0
        for ca, cb in zip(fa, fb):
            d = 20 * math.log10(max(abs(ca), eps) / max(abs(cb), eps))
            acc += d * d
        per_frame.append(acc / len(fa))
        start += hop
    return math.sqrt(sum(per_frame) / len(per_frame))
