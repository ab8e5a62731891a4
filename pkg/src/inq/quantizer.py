"""Power-of-two quantization grids and the ladder-of-powers rounding rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class EmptyLayerError(ValueError):
    """A grid was requested for a layer whose weights are all zero."""


def max_abs(weights) -> float:
    """Largest absolute entry of ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("max_abs of an empty tensor")
    return float(np.max(np.abs(w)))


def compute_n1(s: float) -> int:
    """Exponent of the largest grid level: ``floor(log2(4*s/3))``.

    Evaluated in exact rational arithmetic, so boundary values such as
    ``s = 0.75`` land on the right side.
    """
    if not s > 0 or not math.isfinite(s):
        raise ValueError(f"grid scale must be a positive finite number, got {s!r}")
    q = Fraction(s) * 4 / 3
    n = math.floor(math.log2(float(q)))
    while Fraction(2) ** n > q:
        n -= 1
    while Fraction(2) ** (n + 1) <= q:
        n += 1
    return n


@dataclass(frozen=True)
class QuantGrid:
    """Admissible values ``{0} U {+-2**k : n2 <= k <= n1}`` for bit-width ``b``.

    One bit flags zero, so a b-bit code leaves ``2**(b-2)`` exponents for each
    sign and ``2**(b-1) + 1`` levels in total.
    """

    b: int
    n1: int

    def __post_init__(self):
        if int(self.b) != self.b or self.b < 2:
            raise ValueError(f"bit-width must be an integer >= 2, got {self.b!r}")
        object.__setattr__(self, "b", int(self.b))
        object.__setattr__(self, "n1", int(self.n1))
        # every level and the prune threshold 2**(n2-1) must be exact doubles
        if self.n1 > 1023 or self.n2 - 1 < -1074:
            raise ValueError(f"grid exponents [{self.n2}, {self.n1}] exceed float64 range")

    @property
    def n2(self) -> int:
        return self.n1 + 1 - 2 ** (self.b - 1) // 2

    @property
    def exponents(self) -> list[int]:
        """Exponents from largest to smallest (codec index order)."""
        return list(range(self.n1, self.n2 - 1, -1))

    @property
    def levels(self) -> np.ndarray:
        pos = [math.ldexp(1.0, k) for k in range(self.n2, self.n1 + 1)]
        return np.array([-v for v in reversed(pos)] + [0.0] + pos)

    def contains(self, values) -> np.ndarray:
        """Elementwise membership test."""
        v = np.asarray(values, dtype=np.float64)
        mant, exp = np.frexp(np.abs(v))
        # |v| = 2**k  <=>  mantissa 0.5 and exponent k + 1
        power = (mant == 0.5) & (exp - 1 >= self.n2) & (exp - 1 <= self.n1)
        return (v == 0) | power


def build_grid(weights, b: int) -> QuantGrid:
    """Grid for ``weights`` at bit-width ``b``, scaled by their largest magnitude."""
    if int(b) != b or b < 2:
        raise ValueError(f"bit-width must be an integer >= 2, got {b!r}")
    s = max_abs(weights)
    if s == 0:
        raise EmptyLayerError("cannot build a grid for an all-zero layer")
    return QuantGrid(int(b), compute_n1(s))


def quantize_array(weights, grid: QuantGrid) -> np.ndarray:
    """Round every entry to the grid.

    Magnitudes below ``2**(n2-1)`` become zero. Otherwise the rung ``2**k``
    with ``3*2**k/4 <= |w| < 3*2**k/2`` is chosen, clamped to ``[n2, n1]``;
    values beyond the top rung saturate to ``+-2**n1``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.isnan(w).any():
        raise ValueError("cannot quantize NaN")
    a = np.atleast_1d(np.abs(w))
    mant, exp = np.frexp(a)
    # a = mant * 2**exp with mant in [0.5, 1); the rung is exp when mant >= 3/4
    k = np.where(mant >= 0.75, exp, exp - 1)
    k[np.isinf(a)] = grid.n1
    k = np.clip(k, grid.n2, grid.n1)
    mag = np.ldexp(1.0, k)
    mag[a < math.ldexp(1.0, grid.n2 - 1)] = 0.0
    mag = mag.reshape(w.shape)
    # + 0.0 turns -0.0 into +0.0: zero has a single encoding
    return np.where(w < 0, -mag, mag) + 0.0


def quantize_value(w: float, grid: QuantGrid) -> float:
    """Scalar form of :func:`quantize_array`."""
    if math.isnan(w):
        raise ValueError("cannot quantize NaN")
    return float(quantize_array(np.array([w]), grid)[0])


def quantize_subset(weights, grid: QuantGrid, selector) -> np.ndarray:
    """Copy of ``weights`` with the flat indices in ``selector`` quantized."""
    w = np.array(weights, dtype=np.float64)
    flat = w.reshape(-1)
    idx = np.asarray(selector, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise IndexError(f"selector index out of range for {flat.size} weights")
    flat[idx] = quantize_array(flat[idx], grid)
    return w
