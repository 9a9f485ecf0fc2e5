"""Desk-scale laboratory for low-precision speech synthesis co-design."""

from .assignment import BASELINE, DEMOTED, LayerPrecision, PrecisionAssignment
from .bfp import BFP8, BfpConfig, bfp_roundtrip, dequantize_tensor, quantize_tensor, storage_bits
from .fidelity import FidelityLevel, Tile, fidelity_speedup, reference_matmul, tile_matmul
from .metrics import compare, log_spectral_distance, pcc

__all__ = [
    "BASELINE", "DEMOTED", "LayerPrecision", "PrecisionAssignment",
    "BFP8", "BfpConfig", "bfp_roundtrip", "dequantize_tensor", "quantize_tensor", "storage_bits",
    "FidelityLevel", "Tile", "fidelity_speedup", "reference_matmul", "tile_matmul",
    "compare", "log_spectral_distance", "pcc",
]
