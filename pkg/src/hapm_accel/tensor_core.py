"""Fixed-point formats, tensor containers and the shared MACC arithmetic.

Values are carried as raw integer codes. A code ``c`` in a format with ``f``
fractional bits represents ``c * 2**-f``. Accumulators are plain integers at
``WEIGHT_FMT.frac_bits + ACT_FMT.frac_bits`` fractional bits.

Memory order: ``Tensor3`` codes are indexed ``[x, y, channel]`` and
``Tensor4`` codes ``[k_x, k_y, in_channel, out_channel]``; both flatten in
C order (last index fastest).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACC_BITS = 32


class AccumulatorOverflow(ArithmeticError):
    """Raised when a MACC result leaves the signed 32-bit accumulator range."""


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if not self.signed:
            raise ValueError("only signed formats are supported")
        if not 1 <= self.frac_bits < self.total_bits:
            raise ValueError(f"invalid format Q{self.total_bits}/{self.frac_bits}")

    @property
    def name(self) -> str:
        return f"Q{self.total_bits - 1 - self.frac_bits}.{self.frac_bits}"

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_code(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_value(self) -> float:
        return self.min_code * self.step

    @property
    def max_value(self) -> float:
        return self.max_code * self.step

    def codes(self) -> np.ndarray:
        """Every representable code in ascending order."""
        return np.arange(self.min_code, self.max_code + 1, dtype=np.int64)

    def to_real(self, codes):
        return np.asarray(codes, dtype=np.float64) * self.step

    def saturate(self, codes):
        return np.clip(codes, self.min_code, self.max_code)

    @classmethod
    def parse(cls, name: str) -> FixedPointFormat:
        """Parse ``"Q2.5"`` style names (sign bit implied)."""
        if not name.startswith("Q") or "." not in name:
            raise ValueError(f"bad format name {name!r}")
        int_bits, frac_bits = (int(part) for part in name[1:].split("."))
        return cls(int_bits + frac_bits + 1, frac_bits)


WEIGHT_FMT = FixedPointFormat(8, 5)  # Q2.5
ACT_FMT = FixedPointFormat(8, 4)  # Q3.4
ACC_FRAC = WEIGHT_FMT.frac_bits + ACT_FMT.frac_bits


def quantize_codes(value, fmt: FixedPointFormat):
    """Nearest code to ``value`` (round half to even), saturated to ``fmt``."""
    scaled = np.rint(np.asarray(value, dtype=np.float64) * (1 << fmt.frac_bits))
    codes = fmt.saturate(scaled).astype(np.int64)
    return codes if codes.ndim else int(codes)


def quantize(value, fmt: FixedPointFormat):
    """Quantize real value(s) and return the represented real value(s)."""
    codes = quantize_codes(value, fmt)
    if isinstance(codes, int):
        return codes * fmt.step
    return fmt.to_real(codes)


def shift_round_half_even(raw, shift: int):
    """Arithmetic right shift of integer(s) by ``shift`` bits, rounding half to even.

    A negative ``shift`` is an exact left shift.
    """
    raw = np.asarray(raw, dtype=np.int64)
    if shift <= 0:
        return raw << -shift
    q = raw >> shift
    rem = raw - (q << shift)
    half = 1 << (shift - 1)
    round_up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + round_up


def requantize_accumulator(acc, out_fmt: FixedPointFormat = ACT_FMT, acc_frac: int = ACC_FRAC):
    """Convert accumulator value(s) to ``out_fmt`` codes (half-even, saturating)."""
    codes = out_fmt.saturate(shift_round_half_even(acc, acc_frac - out_fmt.frac_bits))
    return codes if codes.ndim else int(codes)


def check_accumulator(acc):
    acc = np.asarray(acc)
    if acc.size and (acc.max() >= 1 << (ACC_BITS - 1) or acc.min() < -(1 << (ACC_BITS - 1))):
        raise AccumulatorOverflow(f"accumulator exceeded {ACC_BITS} bits")


def macc(a: int, b: int, acc: int = 0) -> int:
    """``acc + a*b`` on raw codes; weight code ``a``, activation code ``b``."""
    out = int(acc) + int(a) * int(b)
    check_accumulator(out)
    return out


def bias_to_acc(bias_codes, weight_fmt: FixedPointFormat = WEIGHT_FMT, acc_frac: int = ACC_FRAC):
    """Align weight-format bias codes to the accumulator's fractional point."""
    return np.asarray(bias_codes, dtype=np.int64) << (acc_frac - weight_fmt.frac_bits)


def acc_to_real(acc, acc_frac: int = ACC_FRAC):
    return np.asarray(acc, dtype=np.float64) * 2.0 ** -acc_frac


@dataclass(frozen=True, eq=False)
class Tensor3:
    """Feature map, codes shaped ``(size_x, size_y, channels)``."""

    codes: np.ndarray
    fmt: FixedPointFormat = field(default=ACT_FMT)

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 3:
            raise ValueError(f"Tensor3 needs 3 dims, got shape {codes.shape}")
        if codes.size and (codes.min() < self.fmt.min_code or codes.max() > self.fmt.max_code):
            raise ValueError("codes outside format range")
        codes = codes.astype(np.int8)
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @classmethod
    def from_real(cls, values, fmt: FixedPointFormat = ACT_FMT) -> Tensor3:
        return cls(quantize_codes(values, fmt), fmt)

    @classmethod
    def zeros(cls, size_x: int, size_y: int, channels: int, fmt: FixedPointFormat = ACT_FMT) -> Tensor3:
        return cls(np.zeros((size_x, size_y, channels), dtype=np.int8), fmt)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.codes.shape

    @property
    def size_x(self) -> int:
        return self.codes.shape[0]

    @property
    def size_y(self) -> int:
        return self.codes.shape[1]

    @property
    def channels(self) -> int:
        return self.codes.shape[2]

    def values(self) -> np.ndarray:
        return self.fmt.to_real(self.codes)

    def padded(self, pad: int) -> Tensor3:
        if pad == 0:
            return self
        return Tensor3(np.pad(self.codes, ((pad, pad), (pad, pad), (0, 0))), self.fmt)

    def __eq__(self, other):
        if not isinstance(other, Tensor3):
            return NotImplemented
        return self.fmt == other.fmt and np.array_equal(self.codes, other.codes)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Kernel bank, codes shaped ``(k_x, k_y, in_channels, out_channels)``."""

    codes: np.ndarray
    fmt: FixedPointFormat = field(default=WEIGHT_FMT)

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 dims, got shape {codes.shape}")
        if codes.size and (codes.min() < self.fmt.min_code or codes.max() > self.fmt.max_code):
            raise ValueError("codes outside format range")
        codes = codes.astype(np.int8)
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @classmethod
    def from_real(cls, values, fmt: FixedPointFormat = WEIGHT_FMT) -> Tensor4:
        return cls(quantize_codes(values, fmt), fmt)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.codes.shape

    @property
    def k_x(self) -> int:
        return self.codes.shape[0]

    @property
    def k_y(self) -> int:
        return self.codes.shape[1]

    @property
    def in_channels(self) -> int:
        return self.codes.shape[2]

    @property
    def out_channels(self) -> int:
        return self.codes.shape[3]

    def values(self) -> np.ndarray:
        return self.fmt.to_real(self.codes)

    def __eq__(self, other):
        if not isinstance(other, Tensor4):
            return NotImplemented
        return self.fmt == other.fmt and np.array_equal(self.codes, other.codes)

    __hash__ = None
