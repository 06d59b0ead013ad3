"""Sign-magnitude fixed-point grids and nearest-level projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import QuantSpec


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantConstraint:
    """Weights restricted to ``{k * step : |k| <= max_level}``."""

    spec: QuantSpec
    layer: int | None = None

    @property
    def step(self) -> float:
        return self.spec.weight_step

    @property
    def max_level(self) -> int:
        return self.spec.max_weight_level

    def levels(self) -> np.ndarray:
        k = np.arange(-self.max_level if self.spec.signed else 0, self.max_level + 1)
        return k * self.step

    def project(self, w: np.ndarray) -> np.ndarray:
        return quantize_project(w, self)

    def is_feasible(self, w: np.ndarray) -> bool:
        return bool(np.array_equal(quantize_project(w, self), w))


def weight_levels(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Integer grid index of every weight (rounded, clipped)."""
    lo = -spec.max_weight_level if spec.signed else 0
    k = round_half_away(np.asarray(w, dtype=np.float64) / spec.weight_step)
    return np.clip(k, lo, spec.max_weight_level)


def quantize_project(w: np.ndarray, q: QuantConstraint) -> np.ndarray:
    """Nearest grid level, ties away from zero, saturating at the extreme levels.

    The step is a power of two, so the division and the rescale are exact.
    """
    out = weight_levels(w, q.spec) * q.step
    # normalise -0.0 so stored zeros compare bit-identical
    return out + 0.0


def weights_to_int(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Exact integer levels of weights already on the grid; raises otherwise."""
    k = np.asarray(w, dtype=np.float64) / spec.weight_step
    ki = np.rint(k)
    if not np.array_equal(ki, k) or np.abs(ki).max(initial=0) > spec.max_weight_level:
        raise ValueError("weights are not on the quantization grid")
    if not spec.signed and (ki < 0).any():
        raise ValueError("negative weight in an unsigned format")
    return ki.astype(np.int64)


def quantize_inputs(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Unsigned input levels: clamp to ``[0, 2**input_bits - 1]`` after rounding."""
    k = round_half_away(np.asarray(x, dtype=np.float64) / spec.input_step)
    return np.clip(k, 0, spec.max_input_level).astype(np.int64)


def choose_frac_bits(w: np.ndarray, weight_bits: int, signed: bool = True) -> int:
    """Largest fractional width whose grid still covers ``max|w|``."""
    mag_bits = weight_bits - 1 if signed else weight_bits
    top = float(np.abs(w).max(initial=0.0))
    frac = weight_bits - 1
    while frac > 0 and top > (2 ** mag_bits - 1) * 2.0 ** -frac:
        frac -= 1
    return frac
