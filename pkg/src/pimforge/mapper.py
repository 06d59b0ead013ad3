"""Mapping of a quantized model onto processing elements and sub-arrays.

Layer ``i`` gets one PE per input channel. A PE holds one input sub-array
(``input_bits`` rows) and one weight sub-array per filter (``weight_bits``
rows); every sub-array has ``kh * kw`` columns. Pruned kernels, filters and
channels are either removed (``physical``) or kept and marked in a skip
LUT (``lut``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .bitserial import BitConvTrace, bitwise_conv2d
from .model import FC, Model, QuantSpec, model_from_dict, model_to_dict
from .quantization import quantize_inputs, weights_to_int
from .trainer import layer_activation

LAYOUT_FORMAT = "pimforge-layout/1"
PHYSICAL = "physical"
LUT = "lut"


class LayoutError(ValueError):
    pass


@dataclass
class SubArray:
    rows: int
    cols: int
    channel: int
    filter: Optional[int] = None  # None for the input sub-array
    pruned: bool = False
    data: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        return {"filter": self.filter, "rows": self.rows, "cols": self.cols, "pruned": self.pruned}


@dataclass
class ProcessingElement:
    channel: int
    input_subarray: SubArray
    weight_subarrays: List[SubArray]

    @property
    def skip_lut(self) -> List[bool]:
        return [s.pruned for s in self.weight_subarrays]

    @property
    def active_subarrays(self) -> List[SubArray]:
        return [s for s in self.weight_subarrays if not s.pruned]

    @property
    def is_idle(self) -> bool:
        return not self.active_subarrays


@dataclass
class LayerLayout:
    index: int
    kind: str
    dims: tuple  # (F, C, kh, kw)
    stride: int
    quant: QuantSpec
    input_hw: tuple
    output_hw: tuple
    pes: List[ProcessingElement]

    @property
    def positions(self) -> int:
        return self.output_hw[0] * self.output_hw[1]

    def active_mask(self) -> np.ndarray:
        """``(F, C)`` mask of weight sub-arrays that take part in computation."""
        mask = np.zeros(self.dims[:2], dtype=bool)
        for pe in self.pes:
            for s in pe.active_subarrays:
                mask[s.filter, pe.channel] = True
        return mask

    def weight_tensor(self) -> np.ndarray:
        """Integer weights reassembled from the sub-array contents."""
        f, c, kh, kw = self.dims
        w = np.zeros((f, c, kh * kw), dtype=np.int64)
        for pe in self.pes:
            for s in pe.weight_subarrays:
                if s.data is not None:
                    w[s.filter, pe.channel] = s.data
        return w.reshape(self.dims)


@dataclass
class PimLayout:
    layers: List[LayerLayout]
    mode: str
    model: Model = field(repr=False)

    def to_dict(self) -> dict:
        layers = []
        for L in self.layers:
            layers.append(
                {
                    "layer": L.index,
                    "kind": L.kind,
                    "dims": list(L.dims),
                    "stride": L.stride,
                    "input_hw": list(L.input_hw),
                    "output_hw": list(L.output_hw),
                    "pes": [
                        {
                            "channel": pe.channel,
                            "input_subarray": {"rows": pe.input_subarray.rows, "cols": pe.input_subarray.cols},
                            "weight_subarrays": [s.to_dict() for s in pe.weight_subarrays],
                            "skip_lut": pe.skip_lut,
                        }
                        for pe in L.pes
                    ],
                }
            )
        return {
            "format": LAYOUT_FORMAT,
            "mode": self.mode,
            "seed": self.model.seed,
            "stats": layout_stats(self),
            "layers": layers,
            "model": model_to_dict(self.model),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PimLayout":
        if doc.get("format") != LAYOUT_FORMAT:
            raise LayoutError(f"unsupported layout format {doc.get('format')!r}")
        layout = build_layout(model_from_dict(doc["model"]), doc["mode"])
        if layout.to_dict()["layers"] != doc["layers"]:
            raise LayoutError("layout tables do not match the embedded model")
        return layout


def _hw(shape):
    return shape[1], shape[2]


def build_layout(model: Model, mode: str = PHYSICAL) -> PimLayout:
    """PE/sub-array layout of a quantized model."""
    if mode not in (PHYSICAL, LUT):
        raise LayoutError(f"unknown removal mode {mode!r}")
    if not model.is_quantized:
        raise LayoutError("model is not quantized; sub-array rows are undefined")
    model.validate()
    shapes = model.activation_shapes()
    layers = []
    for i, layer in enumerate(model.layers):
        q = layer.quant
        try:
            w_int = weights_to_int(layer.weights, q)
        except ValueError as exc:
            raise LayoutError(f"layer {i}: {exc}") from None
        f, c, kh, kw = w_int.shape
        cols = kh * kw
        kernels = w_int.reshape(f, c, cols)
        alive = kernels.any(axis=2)
        in_hw = _hw(shapes[i])
        out_hw = ((in_hw[0] - kh) // layer.stride + 1, (in_hw[1] - kw) // layer.stride + 1)
        pes = []
        for ch in range(c):
            if mode == PHYSICAL and not alive[:, ch].any():
                continue
            subs = []
            for flt in range(f):
                pruned = not alive[flt, ch]
                if mode == PHYSICAL and pruned:
                    continue
                subs.append(SubArray(q.weight_bits, cols, ch, flt, pruned, kernels[flt, ch].copy()))
            pes.append(ProcessingElement(ch, SubArray(q.input_bits, cols, ch), subs))
        layers.append(LayerLayout(i, layer.kind, (f, c, kh, kw), layer.stride, q, in_hw, out_hw, pes))
    return PimLayout(layers, mode, model.copy())


def simulate_layer(layout: PimLayout, index: int, x) -> tuple:
    """Run one layer of one sample on the layout.

    ``x`` holds unsigned input levels, shape ``(C, H, W)`` (flattened for FC
    layers). Returns the integer accumulator tensor ``(F, Ho, Wo)`` and the
    operation trace.
    """
    L = layout.layers[index]
    q = L.quant
    x = np.asarray(x, dtype=np.int64)
    if L.kind == FC:
        x = x.reshape(L.dims[1], 1, 1)
    if x.min(initial=0) < 0 or x.max(initial=0) > q.max_input_level:
        raise LayoutError(f"layer {index}: input outside [0, {q.max_input_level}]")
    active = L.active_mask()
    if not active.any():
        warnings.warn(f"layer {index} is fully pruned; output is zero", RuntimeWarning, stacklevel=2)
    return bitwise_conv2d(
        x, L.weight_tensor(), L.stride, input_bits=q.input_bits, weight_bits=q.magnitude_bits,
        signed=q.signed, active=active,
    )


@dataclass
class SimulationResult:
    logits: np.ndarray
    traces: List[BitConvTrace]  # per layer, for one inference

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)

    @property
    def total(self) -> BitConvTrace:
        out = BitConvTrace()
        for t in self.traces:
            out = BitConvTrace(
                out.and_ops + t.and_ops, out.bit_ands + t.bit_ands, out.bitcounts + t.bitcounts,
                out.shift_accums + t.shift_accums, out.input_writes + t.input_writes,
            )
        return out


def simulate(layout: PimLayout, X) -> SimulationResult:
    """Inference of a batch on the layout.

    Bias, ReLU, pooling and requantization run in the computing set; the
    arithmetic is arranged so the logits equal
    :func:`pimforge.trainer.quantized_forward` bit for bit.
    """
    model = layout.model
    X = np.asarray(X, dtype=np.float64).reshape((-1,) + model.input_shape)
    last = model.num_layers - 1
    logits = []
    traces: Optional[List[BitConvTrace]] = None
    for sample in X:
        a = sample[None]
        sample_traces = []
        for i, (layer, L) in enumerate(zip(model.layers, layout.layers)):
            k = quantize_inputs(a, L.quant)[0]
            acc, tr = simulate_layer(layout, i, k)
            scale = L.quant.weight_step * L.quant.input_step
            z = acc.astype(np.float64)[None] * scale + layer.biases[None, :, None, None]
            a, _, _ = layer_activation(z, layer, i == last)
            sample_traces.append(tr)
        logits.append(a.reshape(-1))
        traces = sample_traces if traces is None else traces
    return SimulationResult(np.array(logits), traces or [])


def propagate_pruning(model: Model) -> Model:
    """Remove weights made redundant by pruned filters and channels.

    A filter with all-zero weights emits the constant ``relu(bias)``; its
    contribution to the next layer is folded into that layer's biases before
    the matching input channel is zeroed. A channel whose weights are all
    zero makes the producing filter of the previous layer dead, so that
    filter (and its bias) is zeroed. Repeats until nothing changes.
    """
    model = model.copy()
    model.activation_shapes()
    changed = True
    while changed:
        changed = False
        for i in range(model.num_layers - 1):
            cur, nxt = model.layers[i], model.layers[i + 1]
            f = cur.weights.shape[0]
            block = nxt.weights.shape[1] // f  # spatial positions per channel after flatten
            w_next = nxt.weights.reshape(nxt.weights.shape[0], f, block, -1)
            dead_in = ~w_next.any(axis=(0, 2, 3))
            dead_filter = ~cur.weights.any(axis=(1, 2, 3))
            for ch in np.flatnonzero(dead_filter & ~dead_in):
                const = max(cur.biases[ch], 0.0)
                if nxt.quant is not None:
                    const = float(quantize_inputs(const, nxt.quant)) * nxt.quant.input_step
                if const != 0.0:
                    nxt.biases = nxt.biases + const * w_next[:, ch].sum(axis=(1, 2))
                w_next = w_next.copy()
                w_next[:, ch] = 0.0
                nxt.weights = w_next.reshape(nxt.weights.shape)
                cur.biases = cur.biases.copy()
                cur.biases[ch] = 0.0
                changed = True
            for ch in np.flatnonzero(dead_in & ~dead_filter):
                cur.weights = cur.weights.copy()
                cur.weights[ch] = 0.0
                cur.biases = cur.biases.copy()
                cur.biases[ch] = 0.0
                changed = True
    return model


def layout_stats(layout: PimLayout) -> dict:
    """PE, sub-array, row and cell counts.

    ``raw`` counts everything physically present; ``effective`` leaves out
    LUT-skipped sub-arrays and idle PEs. In physical mode they agree.
    """
    per_layer = []
    totals = {k: 0 for k in ("pes", "pes_effective", "weight_subarrays", "weight_subarrays_effective",
                             "input_subarrays", "weight_rows", "weight_rows_effective", "cells",
                             "cells_effective")}
    for L in layout.layers:
        row = {
            "layer": L.index,
            "pes": len(L.pes),
            "pes_effective": sum(not pe.is_idle for pe in L.pes),
            "weight_subarrays": sum(len(pe.weight_subarrays) for pe in L.pes),
            "weight_subarrays_effective": sum(len(pe.active_subarrays) for pe in L.pes),
            "input_subarrays": len(L.pes),
            "subarray_shape": [L.quant.weight_bits, L.dims[2] * L.dims[3]],
        }
        wr = L.quant.weight_bits
        cols = L.dims[2] * L.dims[3]
        row["weight_rows"] = row["weight_subarrays"] * wr
        row["weight_rows_effective"] = row["weight_subarrays_effective"] * wr
        row["cells"] = row["weight_rows"] * cols + row["input_subarrays"] * L.quant.input_bits * cols
        row["cells_effective"] = (
            row["weight_rows_effective"] * cols + row["pes_effective"] * L.quant.input_bits * cols
        )
        per_layer.append(row)
        for k in totals:
            totals[k] += row[k]
    totals["mode"] = layout.mode
    totals["layers"] = per_layer
    return totals
