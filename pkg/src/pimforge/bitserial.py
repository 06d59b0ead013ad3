"""Exact integer convolution from AND, popcount and shift.

A dot product of an unsigned operand ``I`` (``M`` bits) and a weight
operand ``W`` (``N`` magnitude bits) is

    sum_{m<M, n<N} 2**(m+n) * popcount(bit_m(I) & bit_n(W))

Signed weights use sign-magnitude: the popcount of each AND row is split by
the weight sign plane and the negative part is subtracted.

Bit planes are packed eight elements per byte along the kernel axis, so a
row-pair AND touches ``ceil(K / 8)`` bytes and the bitcount is a byte
population count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class RangeError(ValueError):
    pass


@dataclass
class BitPlaneTensor:
    """Magnitude planes (LSB first) plus an optional sign plane.

    ``planes`` has shape ``(bits,) + shape``.
    """

    planes: np.ndarray
    bits: int
    frac_bits: int = 0
    sign: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.planes.shape[1:]

    @property
    def signed(self) -> bool:
        return self.sign is not None

    def recompose(self) -> np.ndarray:
        weights = (1 << np.arange(self.bits, dtype=np.int64)).reshape((-1,) + (1,) * len(self.shape))
        mag = (self.planes.astype(np.int64) * weights).sum(axis=0)
        return np.where(self.sign, -mag, mag) if self.signed else mag

    def packed(self) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Planes packed along the last axis (``np.packbits``)."""
        sign = np.packbits(self.sign, axis=-1) if self.signed else None
        return np.packbits(self.planes, axis=-1), sign


def decompose(x, bits: int, signed: bool = False, frac_bits: int = 0) -> BitPlaneTensor:
    """Split integers into ``bits`` magnitude planes (and a sign plane when signed)."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.integer):
        xi = x.astype(np.int64)
        if not np.array_equal(xi, x):
            raise RangeError("decompose expects integer values")
        x = xi
    x = x.astype(np.int64)
    if bits < 1:
        raise RangeError("bits must be >= 1")
    limit = 1 << bits
    mag = np.abs(x)
    bad = np.argwhere(mag >= limit)
    if bad.size:
        idx = tuple(int(v) for v in bad[0])
        raise RangeError(f"element {idx} = {x[idx]} does not fit in {bits} magnitude bits")
    if not signed and (x < 0).any():
        idx = tuple(int(v) for v in np.argwhere(x < 0)[0])
        raise RangeError(f"element {idx} = {x[idx]} is negative in an unsigned operand")
    shifts = np.arange(bits, dtype=np.int64).reshape((-1,) + (1,) * x.ndim)
    planes = ((mag[None] >> shifts) & 1).astype(bool)
    return BitPlaneTensor(planes, bits, frac_bits, (x < 0) if signed else None)


@dataclass
class BitConvTrace:
    """Operation counts of one bit-serial layer (or a sum of layers).

    ``and_ops`` counts row-pair AND operations, ``bit_ands`` the single-bit
    ANDs inside them (row-pair ops times row width). Per-channel arrays give
    the work done by each processing element.
    """

    and_ops: int = 0
    bit_ands: int = 0
    bitcounts: int = 0
    shift_accums: int = 0
    input_writes: int = 0
    pe_and_ops: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pe_input_writes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            "and_ops": int(self.and_ops),
            "bit_ands": int(self.bit_ands),
            "bitcounts": int(self.bitcounts),
            "shift_accums": int(self.shift_accums),
            "input_writes": int(self.input_writes),
            "pe_and_ops": [int(v) for v in self.pe_and_ops],
            "pe_input_writes": [int(v) for v in self.pe_input_writes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BitConvTrace":
        return cls(
            int(d["and_ops"]), int(d["bit_ands"]), int(d["bitcounts"]), int(d["shift_accums"]),
            int(d["input_writes"]), np.asarray(d["pe_and_ops"], dtype=np.int64),
            np.asarray(d["pe_input_writes"], dtype=np.int64),
        )

    def __add__(self, other: "BitConvTrace") -> "BitConvTrace":
        pa, pb = self.pe_and_ops, other.pe_and_ops
        wa, wb = self.pe_input_writes, other.pe_input_writes
        if pa.size and pb.size and pa.size != pb.size:
            raise ValueError("cannot add traces of layers with different PE counts")
        return BitConvTrace(
            self.and_ops + other.and_ops,
            self.bit_ands + other.bit_ands,
            self.bitcounts + other.bitcounts,
            self.shift_accums + other.shift_accums,
            self.input_writes + other.input_writes,
            pa + pb if pa.size and pb.size else (pa if pa.size else pb).copy(),
            wa + wb if wa.size and wb.size else (wa if wa.size else wb).copy(),
        )


def _and_count(ip, wp, wsign, m_bits, n_bits, acc_shape):
    """Core AND/popcount/shift loop over packed planes.

    ``ip``: (M, ..., B) uint8, ``wp``: (N, ..., B) uint8 broadcastable
    against ``ip``; ``wsign`` packed sign plane or None.
    """
    acc = np.zeros(acc_shape, dtype=np.int64)
    neg_mask = wsign
    pos_mask = None if wsign is None else np.bitwise_not(wsign)
    for m in range(m_bits):
        for n in range(n_bits):
            rows = ip[m] & wp[n]
            if neg_mask is None:
                count = np.bitwise_count(rows).sum(axis=-1, dtype=np.int64)
            else:
                count = np.bitwise_count(rows & pos_mask).sum(axis=-1, dtype=np.int64)
                count -= np.bitwise_count(rows & neg_mask).sum(axis=-1, dtype=np.int64)
            acc += count << (m + n)
    return acc


def bitwise_dot(i: BitPlaneTensor, w: BitPlaneTensor) -> Tuple[int, BitConvTrace]:
    """Dot product of two equally sized operands via bit planes."""
    if i.signed:
        raise RangeError("the input operand must be unsigned")
    if i.shape != w.shape:
        raise ValueError(f"operand shapes differ: {i.shape} vs {w.shape}")
    ip = np.packbits(i.planes.reshape(i.bits, -1), axis=-1)
    wp = np.packbits(w.planes.reshape(w.bits, -1), axis=-1)
    ws = np.packbits(w.sign.reshape(-1)) if w.signed else None
    value = int(_and_count(ip, wp, ws, i.bits, w.bits, ()))
    ops = i.bits * w.bits
    k = int(np.prod(i.shape))
    trace = BitConvTrace(ops, ops * k, ops * (2 if w.signed else 1), ops, 0)
    return value, trace


def output_size(h: int, k: int, stride: int) -> int:
    return (h - k) // stride + 1


def bitwise_conv2d(
    x,
    w,
    stride: int = 1,
    *,
    input_bits: int,
    weight_bits: int,
    signed: bool = True,
    active: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, BitConvTrace]:
    """Valid cross-correlation of ``x`` (C, H, W) with ``w`` (F, C, h, w).

    ``weight_bits`` counts magnitude bits only. ``active`` is an optional
    ``(F, C)`` mask of kernels to evaluate; inactive kernels contribute
    nothing and are not counted in the trace.
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(f"incompatible shapes: input {x.shape}, weights {w.shape}")
    f, c, kh, kw = w.shape
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ValueError("kernel larger than input")
    ho, wo = output_size(x.shape[1], kh, stride), output_size(x.shape[2], kw, stride)
    positions = ho * wo
    k = kh * kw

    # (C, P, K) input footprints, one per output position
    patches = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    patches = patches.reshape(c, positions, k)
    ip, _ = decompose(patches, input_bits, signed=False).packed()
    wplanes = decompose(w.reshape(f, c, k), weight_bits, signed=signed)
    wp, ws = wplanes.packed()
    wp = wp[:, :, :, None, :]
    ws = ws[:, :, None, :] if ws is not None else None

    acc = _and_count(ip[:, None], wp, ws, input_bits, weight_bits, (f, c, positions))
    if active is None:
        active = np.ones((f, c), dtype=bool)
    else:
        active = np.asarray(active, dtype=bool)
        acc = np.where(active[:, :, None], acc, 0)
    # cross-channel accumulation happens outside the sub-arrays
    out = acc.sum(axis=1).reshape(f, ho, wo)

    per_pair = input_bits * weight_bits * positions
    kernels_per_pe = active.sum(axis=0).astype(np.int64)
    pe_and = kernels_per_pe * per_pair
    pe_writes = np.where(kernels_per_pe > 0, positions, 0).astype(np.int64)
    and_ops = int(pe_and.sum())
    trace = BitConvTrace(
        and_ops=and_ops,
        bit_ands=and_ops * k,
        bitcounts=and_ops * (2 if signed else 1),
        shift_accums=and_ops,
        input_writes=int(pe_writes.sum()),
        pe_and_ops=pe_and,
        pe_input_writes=pe_writes,
    )
    return out, trace


def int_conv2d(x, w, stride: int = 1) -> np.ndarray:
    """Plain integer cross-correlation (reference)."""
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    f, c, kh, kw = w.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("chwij,fcij->fhw", win, w)


def accumulator_width(bits_i: int, bits_w: int, elements: int) -> int:
    """Signed accumulator width that cannot overflow for ``elements`` products."""
    if min(bits_i, bits_w, elements) < 1:
        raise ValueError("arguments must be positive")
    return bits_i + bits_w + math.ceil(math.log2(elements)) + 1
