"""Energy estimates from data-movement volumes.

Energy = DRAM bits * per-bit DRAM cost + SRAM bits * per-bit SRAM cost.
DRAM traffic comes straight from the analytical model.  SRAM traffic is the
compute-side operand stream: every multiply-accumulate touches one input, one
weight and one output accumulator, each at its role's effective bitwidth.
That construction is deliberately isolated here so a different on-chip access
model can be swapped in without touching the search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dm import role_bits
from .model import ConvLayer, ModelDesc, layer_macs

PJ_PER_JOULE = 1e12


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyParams:
    """Per-bit movement energy, picojoules. Defaults: 0.16 pJ/bit on-chip
    SRAM, 20 pJ/bit off-chip DRAM."""

    sram_pj_per_bit: float = 0.16
    dram_pj_per_bit: float = 20.0

    def __post_init__(self):
        if self.sram_pj_per_bit <= 0 or self.dram_pj_per_bit <= 0:
            raise EnergyError("per-bit energies must be positive")


@dataclass
class EnergyReport:
    sram_bits: float
    dram_bits: float
    joules: float
    per_layer: list = field(default_factory=list)
    baseline_name: str | None = None
    normalized: float | None = None

    def to_record(self) -> dict:
        rec = {
            "sram_bits": self.sram_bits,
            "dram_bits": self.dram_bits,
            "joules": self.joules,
            "per_layer": list(self.per_layer),
        }
        if self.baseline_name is not None:
            rec["baseline"] = self.baseline_name
            rec["normalized"] = self.normalized
        return rec


def energy_from_bits(sram_bits: float, dram_bits: float, params: EnergyParams = EnergyParams()) -> float:
    """Joules for given SRAM/DRAM bit volumes."""
    if sram_bits < 0 or dram_bits < 0:
        raise EnergyError("bit volumes must be nonnegative")
    return (sram_bits * params.sram_pj_per_bit + dram_bits * params.dram_pj_per_bit) / PJ_PER_JOULE


def sram_bits_for_layer(layer: ConvLayer, specs) -> float:
    """Compute-side operand stream: MACs x (input + output + weight bitwidths)."""
    bits = role_bits(layer, specs)
    macs = layer_macs(layer)
    return macs * ((bits["input"] + bits["output"]) + bits["weight"])


def energy(model: ModelDesc, per_layer, params: EnergyParams = EnergyParams()) -> EnergyReport:
    """Energy report for a plan; ``per_layer`` pairs (breakdown, specs) per layer.

    The breakdown supplies the DRAM traffic; the specs supply the bitwidths
    for the SRAM-side stream.
    """
    if len(per_layer) != len(model.layers):
        raise EnergyError(f"plan covers {len(per_layer)} layers, model has {len(model.layers)}")
    sram_total = 0.0
    dram_total = 0.0
    rows = []
    for layer, (breakdown, specs) in zip(model.layers, per_layer):
        if breakdown is None:
            raise EnergyError(f"layer {layer.index} is missing its traffic breakdown")
        dram = breakdown.dm_total_bits
        sram = sram_bits_for_layer(layer, specs)
        sram_total += sram
        dram_total += dram
        rows.append(
            {
                "layer": layer.index,
                "sram_bits": sram,
                "dram_bits": dram,
                "joules": energy_from_bits(sram, dram, params),
            }
        )
    return EnergyReport(
        sram_bits=sram_total,
        dram_bits=dram_total,
        joules=energy_from_bits(sram_total, dram_total, params),
        per_layer=rows,
    )


def normalized_energy(report: EnergyReport, baseline: EnergyReport, baseline_name: str = "original") -> EnergyReport:
    """Attach the energy ratio against a baseline report (1.0 = baseline)."""
    if baseline.joules <= 0:
        raise EnergyError("baseline energy must be positive")
    report.baseline_name = baseline_name
    report.normalized = report.joules / baseline.joules
    return report
