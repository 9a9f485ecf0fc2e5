"""Tile matrix multiply at discrete computational-fidelity levels.

Each operand's significand is cut into four bit-field chunks, most significant
first.  A fidelity level with ``p`` passes multiplies using only the ``p``
leading chunks of each operand: pass 1 forms ``A_hi * B_hi``, pass 2 adds
``A_hi * B_lo1``, ``A_lo1 * B_hi`` and ``A_lo1 * B_lo1``, and so on.  Dropped
chunks are the LoFi error; when four chunks span the whole significand HiFi4
is exact.  Accumulation over the inner dimension is plain float64 in index
order, the same order :func:`reference_matmul` uses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .numerics import round_fraction_bits, split_significand

TILE = 32
N_CHUNKS = 4
DEFAULT_CHUNK_BITS = 2


class FidelityError(ValueError):
    pass


class FidelityLevel(enum.Enum):
    LoFi = 1
    HiFi2 = 2
    HiFi3 = 3
    HiFi4 = 4

    @property
    def passes(self) -> int:
        return self.value

    @classmethod
    def parse(cls, name: Union[str, "FidelityLevel"]) -> "FidelityLevel":
        if isinstance(name, cls):
            return name
        for level in cls:
            if level.name.lower() == str(name).lower():
                return level
        raise FidelityError(f"unknown fidelity level {name!r}")


def fidelity_speedup(level: FidelityLevel) -> float:
    """Throughput factor relative to HiFi4 under the 4/passes model."""
    return N_CHUNKS / FidelityLevel.parse(level).passes


@dataclass(frozen=True, eq=False)
class Tile:
    elements: np.ndarray
    format_tag: str = "FP64"

    def __post_init__(self) -> None:
        arr = np.asarray(self.elements, dtype=np.float64)
        if arr.shape != (TILE, TILE):
            raise FidelityError(f"tile must be {TILE}x{TILE}, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise FidelityError("tile contains non-finite values")
        object.__setattr__(self, "elements", arr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tile):
            return NotImplemented
        return self.format_tag == other.format_tag and np.array_equal(self.elements, other.elements)


def truncate_mantissa(x: float, kept_fraction_bits: int) -> float:
    if not math.isfinite(x):
        raise FidelityError(f"non-finite input {x!r}")
    if kept_fraction_bits < 0:
        raise FidelityError("kept_fraction_bits must be >= 0")
    return float(round_fraction_bits(np.float64(x), kept_fraction_bits))


def _check(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise FidelityError(f"operand {name} contains non-finite values")
    return a


def _accumulate(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise FidelityError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    acc = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        acc += a[:, k, None] * b[None, k, :]
    return acc


def reference_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full-precision product, accumulated over the inner index in order."""
    return _accumulate(_check(a, "a"), _check(b, "b"))


def operand_at_fidelity(x: np.ndarray, level: FidelityLevel, chunk_bits: int) -> np.ndarray:
    """The part of ``x`` the leading ``passes`` chunks carry."""
    chunks = split_significand(x, chunk_bits, N_CHUNKS)
    kept = chunks[0].copy()
    for c in chunks[1 : level.passes]:
        kept += c
    return kept


def fidelity_matmul(
    a: np.ndarray,
    b: np.ndarray,
    fidelity: Union[FidelityLevel, str] = FidelityLevel.HiFi4,
    chunk_bits: Union[int, tuple[int, int]] = DEFAULT_CHUNK_BITS,
) -> np.ndarray:
    """Matrix product of any conformable shapes at the given fidelity.

    ``chunk_bits`` is either one width for both operands or an ``(a, b)``
    pair.  Per inner index, the sum of the executed chunk-pair products
    equals the product of the chunk-truncated operands, which is what is
    accumulated.
    """
    level = FidelityLevel.parse(fidelity)
    ca, cb = (chunk_bits, chunk_bits) if isinstance(chunk_bits, int) else chunk_bits
    if ca < 1 or cb < 1:
        raise FidelityError("chunk_bits must be >= 1")
    a = _check(a, "a")
    b = _check(b, "b")
    return _accumulate(operand_at_fidelity(a, level, ca), operand_at_fidelity(b, level, cb))


def tile_matmul(
    a: Tile,
    b: Tile,
    fidelity: Union[FidelityLevel, str] = FidelityLevel.HiFi4,
    chunk_bits: Union[int, tuple[int, int]] = DEFAULT_CHUNK_BITS,
) -> Tile:
    out = fidelity_matmul(a.elements, b.elements, fidelity, chunk_bits)
    return Tile(out, "FP64")


def lofi_error_bound(
    a: np.ndarray,
    b: np.ndarray,
    fidelity: Union[FidelityLevel, str] = FidelityLevel.LoFi,
    chunk_bits: Union[int, tuple[int, int]] = DEFAULT_CHUNK_BITS,
) -> np.ndarray:
    """Per-element bound on ``|fidelity_matmul - exact product|``.

    Truncating an operand to ``w`` significant bits loses less than
    ``2**(1 - w)`` of its magnitude, so each product term errs by at most
    ``|a||b| (2**(1 - wa) + 2**(1 - wb))`` where ``w = passes * chunk_bits``.
    The bound also absorbs the float64 rounding of both accumulations.
    """
    level = FidelityLevel.parse(fidelity)
    ca, cb = (chunk_bits, chunk_bits) if isinstance(chunk_bits, int) else chunk_bits
    rel = 2.0 ** (1 - level.passes * ca) + 2.0 ** (1 - level.passes * cb)
    k = np.shape(a)[1]
    u = 2.0**-53
    gamma = 2 * k * u / (1 - k * u)
    return (np.abs(a) @ np.abs(b)) * (rel + gamma)
