"""Overflow-safe complex numbers stored as (log2 |z|, arg z)."""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class LogValue:
    log2mag: float  # -inf encodes zero
    phase: float = 0.0

    @classmethod
    def from_number(cls, z) -> "LogValue":
        z = complex(z)
        if z == 0:
            return ZERO
        return cls(math.log2(abs(z)), cmath.phase(z))

    @classmethod
    def power_of_two(cls, exponent: float, sign: int = 1) -> "LogValue":
        return cls(float(exponent), 0.0 if sign >= 0 else math.pi)

    @property
    def is_zero(self) -> bool:
        return self.log2mag == -math.inf

    @property
    def sign(self) -> int:
        """Sign of the real part direction; meaningful for real values."""
        if self.is_zero:
            return 0
        return 1 if math.cos(self.phase) >= 0 else -1

    def __mul__(self, other) -> "LogValue":
        if not isinstance(other, LogValue):
            other = LogValue.from_number(other)
        if self.is_zero or other.is_zero:
            return ZERO
        return LogValue(self.log2mag + other.log2mag, _wrap(self.phase + other.phase))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "LogValue":
        if not isinstance(other, LogValue):
            other = LogValue.from_number(other)
        if other.is_zero:
            raise ZeroDivisionError("LogValue division by zero")
        if self.is_zero:
            return ZERO
        return LogValue(self.log2mag - other.log2mag, _wrap(self.phase - other.phase))

    def __add__(self, other) -> "LogValue":
        if not isinstance(other, LogValue):
            other = LogValue.from_number(other)
        return log_sum([self, other])

    __radd__ = __add__

    def __neg__(self) -> "LogValue":
        if self.is_zero:
            return self
        return LogValue(self.log2mag, _wrap(self.phase + math.pi))

    def __sub__(self, other) -> "LogValue":
        if not isinstance(other, LogValue):
            other = LogValue.from_number(other)
        return self + (-other)

    def scale2(self, exponent: float) -> "LogValue":
        if self.is_zero:
            return self
        return LogValue(self.log2mag + exponent, self.phase)

    def mantissa(self, ref_log2: float) -> complex:
        """z / 2**ref_log2 as an ordinary complex number."""
        if self.is_zero:
            return 0j
        return 2.0 ** (self.log2mag - ref_log2) * cmath.exp(1j * self.phase)

    def to_complex(self) -> complex:
        if self.is_zero:
            return 0j
        if self.log2mag > 1023:
            raise OverflowError(f"2^{self.log2mag:.1f} exceeds float range")
        return self.mantissa(0.0)

    def to_float(self) -> float:
        """Real part; raises on overflow."""
        return self.to_complex().real

    def __abs__(self) -> "LogValue":
        return LogValue(self.log2mag, 0.0) if not self.is_zero else ZERO

    def __repr__(self):
        if self.is_zero:
            return "LogValue(0)"
        return f"LogValue(2^{self.log2mag:.6g} * e^(i{self.phase:.6g}))"


def _wrap(phase: float) -> float:
    return math.remainder(phase, 2 * math.pi)


ZERO = LogValue(-math.inf, 0.0)
ONE = LogValue(0.0, 0.0)


def log_sum(values: Iterable[LogValue]) -> LogValue:
    """Sum with max-shift accumulation; order-independent up to rounding."""
    vals = [v for v in values if not v.is_zero]
    if not vals:
        return ZERO
    ref = max(v.log2mag for v in vals)
    acc = math.fsum(v.mantissa(ref).real for v in vals) + 1j * math.fsum(
        v.mantissa(ref).imag for v in vals
    )
    if acc == 0:
        return ZERO
    return LogValue(ref + math.log2(abs(acc)), cmath.phase(acc))


def from_scaled(mantissa: complex, log2_scale: float) -> LogValue:
    """mantissa * 2**log2_scale."""
    if mantissa == 0:
        return ZERO
    return LogValue(math.log2(abs(mantissa)) + log2_scale, cmath.phase(mantissa))
