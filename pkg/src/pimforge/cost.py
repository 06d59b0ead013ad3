"""Linear area / energy / latency model over a PIM layout and its op trace.

All per-component figures come from :class:`CostParams`; the shipped
defaults are order-of-magnitude placeholders, useful for ratios only.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import List, Optional, Sequence

import numpy as np

from .bitserial import BitConvTrace
from .mapper import PimLayout

REPORT_FORMAT = "pimforge-report/1"


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    area_per_cell: float = 0.05  # um^2
    area_per_subarray_overhead: float = 20.0
    area_per_pe_overhead: float = 400.0
    energy_per_and_row_op: float = 0.05  # pJ
    energy_per_bitcount: float = 0.02
    energy_per_shift_accum: float = 0.01
    energy_per_input_write: float = 1.0
    cycle_per_and_row_op: float = 1.0
    cycle_per_input_write: float = 4.0
    static_power_per_pe: float = 2.0  # uW
    clock: float = 500.0  # MHz

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise CostError(f"{f.name} must be a finite value >= 0, got {v}")
        if self.clock <= 0:
            raise CostError("clock must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CostParams":
        d = {k: v for k, v in d.items() if not k.startswith("_") and k != "format"}
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise CostError(f"unknown cost parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def default(cls) -> "CostParams":
        text = resources.files("pimforge").joinpath("data/cost_params.json").read_text()
        return cls.from_dict(json.loads(text))

    def scaled(self, factor: float) -> "CostParams":
        return CostParams(**{k: v * factor for k, v in asdict(self).items()})


@dataclass
class CostReport:
    area: float = 0.0  # um^2
    energy: float = 0.0  # pJ per inference
    cycles: float = 0.0
    latency: float = 0.0  # s
    throughput: float = 0.0  # inferences / s
    dynamic_power: float = 0.0  # uW
    static_power: float = 0.0  # uW
    layers: List[dict] = field(default_factory=list)
    ratios: Optional[dict] = None

    @property
    def power(self) -> float:
        return self.dynamic_power + self.static_power

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "area_um2": self.area,
            "energy_pj": self.energy,
            "cycles": self.cycles,
            "latency_s": self.latency,
            "throughput_per_s": self.throughput,
            "dynamic_power_uw": self.dynamic_power,
            "static_power_uw": self.static_power,
            "power_uw": self.power,
            "layers": self.layers,
            "ratios": self.ratios,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        if d.get("format") != REPORT_FORMAT:
            raise CostError(f"unsupported report format {d.get('format')!r}")
        return cls(
            d["area_um2"], d["energy_pj"], d["cycles"], d["latency_s"], d["throughput_per_s"],
            d["dynamic_power_uw"], d["static_power_uw"], list(d["layers"]), d.get("ratios"),
        )

    def to_table(self) -> str:
        lines = [
            f"{'layer':>5} {'PEs':>5} {'subarr':>7} {'area um2':>12} {'energy pJ':>12} {'cycles':>10}",
        ]
        for row in self.layers:
            lines.append(
                f"{row['layer']:>5} {row['pes']:>5} {row['subarrays']:>7} {row['area']:>12.1f}"
                f" {row['energy']:>12.1f} {row['cycles']:>10.0f}"
            )
        lines += [
            f"area        {self.area:14.1f} um^2",
            f"energy      {self.energy:14.1f} pJ/inference",
            f"power       {self.power:14.3f} uW (static {self.static_power:.3f})",
            f"throughput  {self.throughput:14.1f} inferences/s",
        ]
        if self.ratios:
            lines.append(
                "vs baseline: area {area_reduction:.2f}x smaller, power {power_reduction:.2f}x lower,"
                " throughput {throughput_gain:.2f}x higher".format(**self.ratios)
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["layer", "pes", "subarrays", "area", "energy", "cycles", "static_power"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.layers:
            writer.writerow({k: row[k] for k in cols})
        return buf.getvalue()


def estimate(layout: PimLayout, traces: Sequence[BitConvTrace], params: CostParams) -> CostReport:
    """Cost of one inference.

    PEs of a layer run in parallel; inside a PE, sub-arrays and bit-row pairs
    are sequential, so a layer takes as long as its busiest PE. Layers run
    one after another. Sub-arrays count toward area whenever they are
    physically present, LUT-skipped or not.
    """
    if len(traces) != len(layout.layers):
        raise CostError(f"{len(traces)} layer traces for a {len(layout.layers)}-layer layout")
    p = params
    report = CostReport()
    for L, t in zip(layout.layers, traces):
        c = L.dims[1]
        if t.pe_and_ops.size != c or t.pe_input_writes.size != c:
            raise CostError(f"layer {L.index}: trace has {t.pe_and_ops.size} PEs, layout has {c} channels")
        present = {pe.channel for pe in L.pes}
        idle = [ch for ch in range(c) if ch not in present and (t.pe_and_ops[ch] or t.pe_input_writes[ch])]
        if idle:
            raise CostError(f"layer {L.index}: trace charges work to removed PEs {idle}")
        cols = L.dims[2] * L.dims[3]
        n_pe = len(L.pes)
        n_sub = sum(len(pe.weight_subarrays) + 1 for pe in L.pes)
        cells = sum(
            (sum(s.rows for s in pe.weight_subarrays) + pe.input_subarray.rows) * cols for pe in L.pes
        )
        area = cells * p.area_per_cell + n_sub * p.area_per_subarray_overhead + n_pe * p.area_per_pe_overhead
        energy = (
            t.and_ops * p.energy_per_and_row_op
            + t.bitcounts * p.energy_per_bitcount
            + t.shift_accums * p.energy_per_shift_accum
            + t.input_writes * p.energy_per_input_write
        )
        pe_cycles = t.pe_and_ops * p.cycle_per_and_row_op + t.pe_input_writes * p.cycle_per_input_write
        cycles = float(pe_cycles.max(initial=0))
        static = n_pe * p.static_power_per_pe
        report.layers.append(
            {
                "layer": L.index, "pes": n_pe, "subarrays": n_sub, "area": area, "energy": energy,
                "cycles": cycles, "static_power": static,
                "pe_cycles": [float(v) for v in pe_cycles],
            }
        )
        report.area += area
        report.energy += energy
        report.cycles += cycles
        report.static_power += static
    if report.cycles > 0:
        report.latency = report.cycles / (p.clock * 1e6)
        report.throughput = 1.0 / report.latency
        # pJ / s -> uW
        report.dynamic_power = report.energy * 1e-12 / report.latency * 1e6
    return report


def compare(compressed: CostReport, baseline: CostReport) -> dict:
    """Area and power reduction (baseline / compressed) and throughput gain."""
    if baseline.area <= 0 or baseline.power <= 0 or baseline.throughput <= 0:
        raise CostError("baseline report has zero area, power or throughput")
    if compressed.area <= 0 or compressed.power <= 0:
        raise CostError("compressed report has zero area or power")
    return {
        "area_reduction": baseline.area / compressed.area,
        "power_reduction": baseline.power / compressed.power,
        "throughput_gain": compressed.throughput / baseline.throughput,
    }
