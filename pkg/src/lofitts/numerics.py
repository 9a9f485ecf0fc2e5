"""Low-level float bit manipulation shared by the format and fidelity modules."""

from __future__ import annotations

import numpy as np


def round_fraction_bits(x: np.ndarray, frac_bits: int) -> np.ndarray:
    """Round each element to a significand with ``frac_bits`` fraction bits.

    Round-to-nearest, ties-to-even.  Zeros (including -0.0) pass through with
    their sign.  A carry out of the significand bumps the exponent.
    """
    x = np.asarray(x, dtype=np.float64)
    if frac_bits >= 52:
        return x.copy()
    m, e = np.frexp(x)
    # m in [0.5, 1): the significand 1.f is 2m, so keep frac_bits + 1 bits of m
    scaled = np.ldexp(m, frac_bits + 1)
    out = np.ldexp(np.rint(scaled), e - frac_bits - 1)
    return np.where(x == 0, x, out)


def split_significand(x: np.ndarray, chunk_bits: int, n_chunks: int) -> list[np.ndarray]:
    """Split each element's significand into ``n_chunks`` bit fields.

    Chunk 0 holds the leading ``chunk_bits`` bits (including the implicit
    one), chunk 1 the next ``chunk_bits`` bits, and so on.  Every chunk keeps
    the sign of ``x`` and its own scale, so ``sum(chunks)`` is ``x`` truncated
    toward zero to ``chunk_bits * n_chunks`` significant bits.  All arithmetic
    is exact.
    """
    x = np.asarray(x, dtype=np.float64)
    m, e = np.frexp(np.abs(x))
    sign = np.where(np.signbit(x), -1.0, 1.0)
    chunks = []
    prev = np.zeros_like(m)
    for j in range(n_chunks):
        width = chunk_bits * (j + 1)
        top = np.floor(np.ldexp(m, width))
        field = top - np.ldexp(prev, chunk_bits)
        chunks.append(sign * np.ldexp(field, e - width))
        prev = top
    return chunks
