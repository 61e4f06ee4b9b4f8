"""Power-of-2 coefficient sets, column normalisation and 8-bit basis quantisation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import FeasibilityError, ParameterError

MAX_EXPONENTS = 16  # symbol ids reserve 4 bits for the exponent offset


@dataclass(frozen=True)
class ExponentSet:
    """Contiguous exponent range ``p_min..p_max``."""

    p_min: int = -7
    p_max: int = 0

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise ParameterError(f"p_min={self.p_min} exceeds p_max={self.p_max}")
        if len(self) > MAX_EXPONENTS:
            raise ParameterError(f"|P|={len(self)} exceeds {MAX_EXPONENTS}")
        if not (-126 <= self.p_min and self.p_max <= 126):
            raise ParameterError("exponents must lie in [-126, 126]")

    def __len__(self):
        return self.p_max - self.p_min + 1

    def __contains__(self, p):
        return self.p_min <= p <= self.p_max

    def candidates(self) -> np.ndarray:
        """Every element of the value set, ascending."""
        mags = [math.ldexp(1.0, p) for p in range(self.p_min, self.p_max + 1)]
        return np.array(sorted([0.0] + mags + [-m for m in mags]))


@dataclass(frozen=True)
class Pow2Value:
    sign: int = 0  # 0 means exact zero
    exponent: int = 0

    @property
    def is_zero(self):
        return self.sign == 0

    def __float__(self):
        return 0.0 if self.sign == 0 else self.sign * math.ldexp(1.0, self.exponent)


ZERO = Pow2Value()


@dataclass
class Pow2Matrix:
    """Grid of signed powers of two stored as int8 sign and exponent planes.

    ``sign`` is -1, 0 or +1; ``exp`` is meaningful only where ``sign != 0``
    and is held at 0 elsewhere.
    """

    sign: np.ndarray
    exp: np.ndarray

    def __post_init__(self):
        self.sign = np.asarray(self.sign, dtype=np.int8)
        self.exp = np.asarray(self.exp, dtype=np.int8)
        if self.sign.shape != self.exp.shape:
            raise ParameterError("sign/exponent shape mismatch")

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape, np.int8), np.zeros(shape, np.int8))

    @classmethod
    def from_values(cls, values, P: ExponentSet):
        """Exact conversion of values that are already in the set; raises otherwise."""
        values = np.asarray(values, dtype=np.float64)
        sign, exp = _kernels.pow2_project(values, P.p_min, P.p_max)
        back = np.where(sign != 0, sign * np.ldexp(1.0, exp.astype(np.int32)), 0.0)
        if not np.array_equal(back, values):
            raise FeasibilityError("values are not exact signed powers of two within P")
        return cls(sign, exp)

    @property
    def shape(self):
        return self.sign.shape

    @property
    def mask(self) -> np.ndarray:
        return self.sign != 0

    def values(self) -> np.ndarray:
        return np.where(self.sign != 0, self.sign * np.ldexp(1.0, self.exp.astype(np.int32)), 0.0)

    def nnz(self) -> int:
        return int(np.count_nonzero(self.sign))

    def sparsity(self) -> float:
        return 1.0 - self.nnz() / self.sign.size if self.sign.size else 0.0

    def check_feasible(self, P: ExponentSet):
        nz = self.sign != 0
        e = self.exp[nz]
        if e.size and (e.min() < P.p_min or e.max() > P.p_max):
            raise FeasibilityError(f"exponent outside [{P.p_min}, {P.p_max}]")
        if np.any(self.exp[~nz] != 0) or np.any(np.abs(self.sign) > 1):
            raise FeasibilityError("malformed power-of-two grid")

    def is_feasible(self, P: ExponentSet) -> bool:
        try:
            self.check_feasible(P)
        except FeasibilityError:
            return False
        return True

    def copy(self):
        return Pow2Matrix(self.sign.copy(), self.exp.copy())

    def __eq__(self, other):
        return (isinstance(other, Pow2Matrix) and np.array_equal(self.sign, other.sign)
                and np.array_equal(self.exp, other.exp))


def nearest_pow2(x: float, P: ExponentSet = ExponentSet()) -> Pow2Value:
    """Closest member of {0, +-2^p : p in P}; ties resolve to the smaller magnitude."""
    s, e = _kernels.pow2_project(np.array([x], dtype=np.float64), P.p_min, P.p_max)
    if s[0] == 0:
        return ZERO
    return Pow2Value(int(s[0]), int(e[0]))


def quantize_pow2(C, P: ExponentSet = ExponentSet()) -> Pow2Matrix:
    sign, exp = _kernels.pow2_project(C, P.p_min, P.p_max)
    return Pow2Matrix(sign, exp)


def normalize_and_quantize_columns(C, P: ExponentSet = ExponentSet()):
    """Scale columns of ``C`` to unit norm, then project onto the power-of-2 set.

    Returns ``(Cq, scales)``. The caller multiplies row ``j`` of the basis by
    ``scales[j]`` so that ``C @ B`` is preserved up to the rounding error.
    All-zero columns get scale 1.
    """
    C = np.asarray(C, dtype=np.float64)
    scales = np.linalg.norm(C, axis=0)
    scales[scales == 0] = 1.0
    return quantize_pow2(C / scales, P), scales


@dataclass
class FixedPointMatrix:
    q: np.ndarray  # int8, |q| <= 127
    scale: float  # float32-representable step

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.int8)
        if np.any(self.q == -128):
            raise ParameterError("fixed-point codes must lie in [-127, 127]")
        if not self.scale > 0:
            raise ParameterError("fixed-point scale must be positive")

    @property
    def shape(self):
        return self.q.shape


def quantize_basis(B) -> FixedPointMatrix:
    """Symmetric per-matrix 8-bit quantisation; step = max|B| / 127.

    The step is rounded up to the next float32 so that it survives a float32
    round trip and no code needs clamping.
    """
    B = np.asarray(B, dtype=np.float64)
    peak = float(np.max(np.abs(B))) if B.size else 0.0
    if peak == 0.0:
        return FixedPointMatrix(np.zeros(B.shape, np.int8), 1.0)
    step = np.float32(peak / 127.0)
    while float(step) * 127.0 < peak:
        step = np.nextafter(step, np.float32(np.inf))
    step = float(step)
    ratio = B / step
    q = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)  # half away from zero
    return FixedPointMatrix(np.clip(q, -127, 127).astype(np.int8), step)


def dequantize_basis(F: FixedPointMatrix) -> np.ndarray:
    return F.q.astype(np.float64) * F.scale
