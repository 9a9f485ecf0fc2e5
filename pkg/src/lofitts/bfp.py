"""Block floating point (BFP) encode/decode and storage accounting.

A BFP block stores one biased exponent shared by ``block_size`` values.  Each
value keeps a sign bit and an unsigned ``mantissa_bits``-wide magnitude that is
interpreted relative to the shared exponent:

    value = (-1)**sign * mantissa * 2**(shared_exp - bias - mantissa_bits + 1)

The shared exponent is the exponent of the largest magnitude in the block, so
that element keeps a leading one in the top mantissa bit.  Biased exponent 0 is
reserved for the canonical zero block.  Blocks whose largest magnitude is below
the smallest representable scale flush to zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping, Sequence, Union

import numpy as np

from .numerics import round_fraction_bits

MAGIC = b"BFPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBHH")

#: Storage width in bits of the scalar (non-block) formats.
SCALAR_FORMATS = {"FP32": 32, "BF16": 16}


class BfpError(ValueError):
    """Raised for invalid BFP inputs or malformed encoded data."""


@dataclass(frozen=True)
class BfpConfig:
    block_size: int = 16
    mantissa_bits: int = 7
    exponent_bits: int = 8

    def __post_init__(self) -> None:
        if self.block_size < 1 or self.block_size > 0xFFFF:
            raise BfpError(f"block_size must be in [1, 65535], got {self.block_size}")
        if not 1 <= self.mantissa_bits <= 32:
            raise BfpError(f"mantissa_bits must be in [1, 32], got {self.mantissa_bits}")
        if not 1 <= self.exponent_bits <= 11:
            raise BfpError(f"exponent_bits must be in [1, 11], got {self.exponent_bits}")

    @classmethod
    def preset(cls, name: str) -> "BfpConfig":
        try:
            return _PRESETS[name.upper()]
        except KeyError:
            raise BfpError(f"unknown BFP preset {name!r}; known: {sorted(_PRESETS)}") from None

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def min_exponent(self) -> int:
        """Smallest unbiased exponent of a non-zero block."""
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        return (1 << self.exponent_bits) - 1 - self.bias

    @property
    def max_mantissa(self) -> int:
        return (1 << self.mantissa_bits) - 1

    @property
    def bits_per_block(self) -> int:
        return self.exponent_bits + self.block_size * (1 + self.mantissa_bits)


_PRESETS = {"BFP8": BfpConfig(16, 7, 8), "BFP4": BfpConfig(16, 3, 8)}
BFP8 = _PRESETS["BFP8"]


@dataclass(frozen=True)
class BfpBlock:
    shared_exponent: int
    signs: tuple[int, ...]
    mantissas: tuple[int, ...]

    def is_zero(self) -> bool:
        return not any(self.mantissas)


@dataclass(frozen=True, eq=False)
class BfpTensor:
    """A tensor stored as a row-major sequence of BFP blocks.

    The block contents live in three arrays (``exponents``, ``signs``,
    ``mantissas``) with one row per block; :attr:`blocks` exposes them as
    :class:`BfpBlock` objects.
    """

    shape: tuple[int, ...]
    config: BfpConfig
    exponents: np.ndarray
    signs: np.ndarray
    mantissas: np.ndarray
    pad_count: int

    @property
    def blocks(self) -> list[BfpBlock]:
        return [
            BfpBlock(int(e), tuple(int(v) for v in s), tuple(int(v) for v in m))
            for e, s, m in zip(self.exponents, self.signs, self.mantissas)
        ]

    @property
    def n_blocks(self) -> int:
        return int(self.exponents.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BfpTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.config == other.config
            and self.pad_count == other.pad_count
            and np.array_equal(self.exponents, other.exponents)
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.mantissas, other.mantissas)
        )


def _check_finite(values: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise BfpError(f"non-finite value {values.flat[i]!r} at index {i}")


def _quantize_rows(rows: np.ndarray, config: BfpConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode a ``(n_blocks, block_size)`` array; returns (exponents, signs, mantissas)."""
    mag = np.abs(rows)
    peak = mag.max(axis=1) if rows.shape[1] else np.zeros(rows.shape[0])
    _, e = np.frexp(peak)
    e = e.astype(np.int64) - 1  # peak in [2**e, 2**(e+1))
    zero = (peak == 0) | (e < config.min_exponent)
    over = ~zero & (e > config.max_exponent)
    if over.any():
        i = int(np.flatnonzero(over)[0])
        raise BfpError(
            f"block {i} exponent {int(e[i])} exceeds the largest representable "
            f"exponent {config.max_exponent}"
        )
    e = np.where(zero, config.min_exponent, e)
    scaled = np.ldexp(mag, (config.mantissa_bits - 1 - e)[:, None])
    mant = np.minimum(np.rint(scaled), config.max_mantissa).astype(np.uint64)
    mant[zero] = 0
    signs = np.signbit(rows).astype(np.uint8)
    signs[zero] = 0
    exps = np.where(zero, 0, e + config.bias).astype(np.int64)
    return exps, signs, mant


def _dequantize_rows(exps: np.ndarray, signs: np.ndarray, mant: np.ndarray, config: BfpConfig) -> np.ndarray:
    if np.any(mant > config.max_mantissa):
        raise BfpError(f"mantissa exceeds {config.mantissa_bits}-bit range")
    if np.any(signs > 1):
        raise BfpError("sign values must be 0 or 1")
    if np.any((exps < 0) | (exps >= 1 << config.exponent_bits)):
        raise BfpError(f"shared exponent outside {config.exponent_bits}-bit range")
    scale = np.where(exps == 0, 0, exps - config.bias - config.mantissa_bits + 1)
    vals = np.ldexp(mant.astype(np.float64), scale[:, None])
    vals = np.where(exps[:, None] == 0, 0.0, vals)
    return np.where(signs == 1, -vals, vals)


def quantize_block(values: Sequence[float], config: BfpConfig = BFP8) -> BfpBlock:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (config.block_size,):
        raise BfpError(f"expected {config.block_size} values, got shape {arr.shape}")
    _check_finite(arr)
    e, s, m = _quantize_rows(arr[None, :], config)
    return BfpBlock(int(e[0]), tuple(int(v) for v in s[0]), tuple(int(v) for v in m[0]))


def dequantize_block(block: BfpBlock, config: BfpConfig = BFP8) -> list[float]:
    if len(block.mantissas) != config.block_size or len(block.signs) != config.block_size:
        raise BfpError(f"block must hold {config.block_size} elements")
    if any(m < 0 for m in block.mantissas):
        raise BfpError("mantissas must be non-negative")
    if block.shared_exponent == 0 and not block.is_zero():
        raise BfpError("reserved exponent 0 used with non-zero mantissas")
    out = _dequantize_rows(
        np.array([block.shared_exponent], dtype=np.int64),
        np.array([block.signs], dtype=np.uint8),
        np.array([block.mantissas], dtype=np.uint64),
        config,
    )
    return out[0].tolist()


def quantize_tensor(values: np.ndarray, config: BfpConfig = BFP8) -> BfpTensor:
    arr = np.asarray(values, dtype=np.float64)
    flat = arr.ravel()
    _check_finite(flat)
    n_blocks = -(-flat.size // config.block_size)
    pad = n_blocks * config.block_size - flat.size
    rows = np.concatenate([flat, np.zeros(pad)]).reshape(n_blocks, config.block_size)
    e, s, m = _quantize_rows(rows, config)
    return BfpTensor(tuple(arr.shape), config, e, s, m, pad)


def dequantize_tensor(tensor: BfpTensor) -> np.ndarray:
    cfg = tensor.config
    vals = _dequantize_rows(tensor.exponents, tensor.signs, tensor.mantissas, cfg)
    n = int(np.prod(tensor.shape, dtype=np.int64))
    return vals.ravel()[:n].reshape(tensor.shape)


def bfp_roundtrip(values: np.ndarray, config: BfpConfig = BFP8) -> np.ndarray:
    return dequantize_tensor(quantize_tensor(values, config))


def round_scalar(values: np.ndarray, fmt: str) -> np.ndarray:
    """Round to a scalar storage format ("FP32" or "BF16") and back to float64.

    BF16 keeps 7 fraction bits with round-to-nearest-even; its exponent range
    is not modelled.
    """
    fmt = fmt.upper()
    if fmt == "FP32":
        return np.asarray(values, dtype=np.float32).astype(np.float64)
    if fmt == "BF16":
        return round_fraction_bits(values, 7)
    raise BfpError(f"unknown scalar format {fmt!r}")


FormatLike = Union[BfpConfig, str]


def storage_bits(fmt: FormatLike, n_values: int) -> int:
    """Exact storage cost in bits of ``n_values`` values in ``fmt``.

    ``fmt`` is a :class:`BfpConfig`, a BFP preset name ("BFP8"), or a scalar
    format name ("FP32", "BF16").
    """
    if n_values < 0:
        raise BfpError("n_values must be >= 0")
    if isinstance(fmt, str):
        name = fmt.upper()
        if name in SCALAR_FORMATS:
            return n_values * SCALAR_FORMATS[name]
        fmt = BfpConfig.preset(name)
    return math.ceil(n_values / fmt.block_size) * fmt.bits_per_block


def model_size_ratio(values_by_format: Mapping[str, int], baseline: str = "BF16") -> float:
    """Size of the model stored entirely in ``baseline`` over its mixed-format size."""
    total = sum(values_by_format.values())
    mixed = sum(storage_bits(fmt, n) for fmt, n in values_by_format.items())
    if mixed == 0:
        raise BfpError("model has no values")
    return storage_bits(baseline, total) / mixed


# -- binary dump ------------------------------------------------------------


def _bits_of(values: np.ndarray, width: int) -> np.ndarray:
    """MSB-first bits of unsigned integers, shape ``values.shape + (width,)``."""
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((values.astype(np.uint64)[..., None] >> shifts) & np.uint64(1)).astype(np.uint8)


def _from_bits(bits: np.ndarray) -> np.ndarray:
    width = bits.shape[-1]
    weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
    return (bits.astype(np.uint64) * weights).sum(axis=-1, dtype=np.uint64)


def encode(tensor: BfpTensor) -> bytes:
    """Serialize to the little-endian ``BFPT`` container."""
    cfg = tensor.config
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, cfg.exponent_bits, cfg.mantissa_bits,
                          cfg.block_size, len(tensor.shape))
    dims = struct.pack(f"<{len(tensor.shape)}Q", *tensor.shape)
    if tensor.n_blocks == 0:
        return header + dims
    exp_bits = _bits_of(tensor.exponents, cfg.exponent_bits)
    elem = np.concatenate(
        [tensor.signs[..., None].astype(np.uint8), _bits_of(tensor.mantissas, cfg.mantissa_bits)],
        axis=-1,
    ).reshape(tensor.n_blocks, -1)
    stream = np.concatenate([exp_bits, elem], axis=1).ravel()
    return header + dims + np.packbits(stream).tobytes()


def decode(data: bytes) -> BfpTensor:
    if len(data) < _HEADER.size:
        raise BfpError("truncated header")
    magic, version, eb, mb, bs, rank = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BfpError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise BfpError(f"unsupported version {version}")
    cfg = BfpConfig(bs, mb, eb)
    off = _HEADER.size
    if len(data) < off + 8 * rank:
        raise BfpError("truncated dimension list")
    shape = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    n = int(np.prod(shape, dtype=np.int64))
    n_blocks = -(-n // bs)
    pad = n_blocks * bs - n
    need = -(-n_blocks * cfg.bits_per_block // 8)
    payload = np.frombuffer(data, dtype=np.uint8, count=len(data) - off, offset=off)
    if payload.size != need:
        raise BfpError(f"payload is {payload.size} bytes, expected {need}")
    bits = np.unpackbits(payload)[: n_blocks * cfg.bits_per_block].reshape(n_blocks, cfg.bits_per_block)
    exps = _from_bits(bits[:, :eb]).astype(np.int64)
    elem = bits[:, eb:].reshape(n_blocks, bs, 1 + mb)
    signs = elem[..., 0].astype(np.uint8)
    mant = _from_bits(elem[..., 1:])
    return BfpTensor(tuple(shape), cfg, exps, signs, mant, pad)


def dump(tensor: BfpTensor, fh: BinaryIO) -> None:
    fh.write(encode(tensor))


def load(fh: BinaryIO) -> BfpTensor:
    return decode(fh.read())
