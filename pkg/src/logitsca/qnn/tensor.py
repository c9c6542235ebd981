"""Signed 8-bit fixed-point tensors with power-of-two scales."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Q7_MIN, Q7_MAX = -128, 127


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantizedTensor:
    """int8 payload; real value = data * 2**-frac_bits."""

    data: np.ndarray
    frac_bits: int

    def __post_init__(self):
        if not 0 <= self.frac_bits <= 7:
            raise ValueError(f"frac_bits must be in [0, 7], got {self.frac_bits}")
        data = np.asarray(self.data)
        if data.ndim == 0 or 0 in data.shape:
            raise ValueError("shape must be non-empty with every dimension >= 1")
        if data.dtype != np.int8:
            if data.min() < Q7_MIN or data.max() > Q7_MAX:
                raise ValueError("elements must lie in [-128, 127]")
            data = data.astype(np.int8)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def scale(self) -> float:
        return 2.0 ** -self.frac_bits


def quantize_ptq(t, frac_bits: int) -> QuantizedTensor:
    """Round-half-away-from-zero of ``t * 2**frac_bits``, saturated to int8."""
    if not 0 <= frac_bits <= 7:
        raise ValueError(f"frac_bits must be in [0, 7], got {frac_bits}")
    scaled = round_half_away(np.asarray(t, dtype=np.float64) * (1 << frac_bits))
    q = np.clip(scaled, Q7_MIN, Q7_MAX).astype(np.int8)
    return QuantizedTensor(q, frac_bits)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return (q.data.astype(np.float32) * np.float32(q.scale)).astype(np.float32)


def frac_bits_for_range(max_abs: float) -> int:
    """Largest frac_bits in [0, 7] that keeps ``max_abs`` from saturating."""
    if max_abs <= 0 or not math.isfinite(max_abs):
        return 7
    return int(np.clip(7 - math.ceil(math.log2(max_abs)), 0, 7))
