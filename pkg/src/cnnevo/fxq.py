"""Emulated signed fixed-point arithmetic.

Values are stored as saturated integer codes ``raw`` with ``frac_bits``
fractional bits, so the represented real is ``raw / 2**frac_bits``.  Only
multiplications are emulated: both operands are quantized, multiplied as
integers, rescaled with the same rounding rule and saturated.  Everything
around the multiplier (accumulation, bias, activations) stays in floating
point.

Rounding is half-away-from-zero and overflow saturates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FxFormat:
    total_bits: int = 16
    frac_bits: int = 8

    def __post_init__(self):
        if not (0 < self.frac_bits < self.total_bits <= 32):
            raise ValueError(
                f"invalid fixed-point format: total_bits={self.total_bits}, "
                f"frac_bits={self.frac_bits}"
            )

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def code_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def code_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale

    def __str__(self):
        return f"Q{self.total_bits - self.frac_bits - 1}.{self.frac_bits}"


Q7_8 = FxFormat(16, 8)


@dataclass(frozen=True)
class FxValue:
    raw: int
    fmt: FxFormat = Q7_8

    def __post_init__(self):
        if not (self.fmt.code_min <= self.raw <= self.fmt.code_max):
            raise ValueError(f"code {self.raw} outside {self.fmt} range")

    def __float__(self):
        return from_fx(self)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, fmt: FxFormat = Q7_8) -> np.ndarray:
    """Array version of :func:`to_fx`; returns int32 codes (int64 above 31 bits)."""
    x = np.asarray(x, dtype=np.float64)
    scaled = np.clip(x * fmt.scale, fmt.code_min - 1.0, fmt.code_max + 1.0)
    codes = np.clip(_round_half_away(scaled), fmt.code_min, fmt.code_max)
    return codes.astype(np.int32 if fmt.total_bits < 32 else np.int64)


def dequantize(codes, fmt: FxFormat = Q7_8) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / fmt.scale


def rescale_product(prod, fmt: FxFormat = Q7_8) -> np.ndarray:
    """Rescale raw integer products back to the code grid, rounding and saturating."""
    prod = np.asarray(prod, dtype=np.int64)
    mag = (np.abs(prod) + (1 << (fmt.frac_bits - 1))) >> fmt.frac_bits
    return np.clip(np.sign(prod) * mag, fmt.code_min, fmt.code_max)


def to_fx(x: float, fmt: FxFormat = Q7_8) -> FxValue:
    if not np.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x!r}")
    return FxValue(int(quantize(x, fmt)), fmt)


def from_fx(v: FxValue) -> float:
    return v.raw / v.fmt.scale


def quantized_mul(a: float, b: float, fmt: FxFormat = Q7_8) -> float:
    prod = to_fx(a, fmt).raw * to_fx(b, fmt).raw
    return int(rescale_product(prod, fmt)) / fmt.scale


def quantized_mul_array(a, b, fmt: FxFormat = Q7_8) -> np.ndarray:
    """Elementwise (broadcasting) :func:`quantized_mul`."""
    prod = quantize(a, fmt).astype(np.int64) * quantize(b, fmt).astype(np.int64)
    return dequantize(rescale_product(prod, fmt), fmt)


def parse_mode(mode) -> FxFormat | None:
    """Map a numeric-mode spec to a format; ``None`` means floating point.

    Accepts ``"fp"``, ``"fx16"``, ``"fx8"`` (Q3.4), ``"fx:N,F"`` or an
    :class:`FxFormat` directly.
    """
    if mode is None or isinstance(mode, FxFormat):
        return mode
    mode = str(mode).strip().lower()
    if mode == "fp":
        return None
    if mode == "fx16":
        return Q7_8
    if mode == "fx8":
        return FxFormat(8, 4)
    if mode.startswith("fx:") or mode.startswith("fx("):
        body = mode[3:].strip("()")
        total, frac = (int(t) for t in body.split(","))
        return FxFormat(total, frac)
    raise ValueError(f"unknown numeric mode {mode!r}")


def mode_name(fmt: FxFormat | None) -> str:
    if fmt is None:
        return "fp"
    if fmt == Q7_8:
        return "fx16"
    return f"fx:{fmt.total_bits},{fmt.frac_bits}"
