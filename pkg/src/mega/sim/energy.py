"""Linear energy model over raw activity counters."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .config import HwConfig

PJ_PER_UJ = 1e6
MAC32_BITOPS = 32 * 32


@dataclass(frozen=True)
class ActivityCounters:
    dram_bits: int = 0
    sram_bits: int = 0
    bitops: int = 0
    cycles: float = 0.0


@dataclass(frozen=True)
class EnergyBreakdown:
    dram: float
    sram: float
    pu: float
    leakage: float

    @property
    def total(self) -> float:
        return self.dram + self.sram + self.pu + self.leakage

    def to_dict(self) -> dict:
        return asdict(self)


def mult_bitops(feature_bits: int, weight_bits: int) -> int:
    """BitOPs of one multiply; a 32x32-bit MAC counts as 1024."""
    return feature_bits * weight_bits


def energy_report(stats: ActivityCounters, hw: HwConfig) -> EnergyBreakdown:
    """Energy in microjoules."""
    e = hw.energy_constants
    leak_pj = e.leakage_mw * 1e-3 * (stats.cycles / (hw.clock_ghz * 1e9)) * 1e12
    return EnergyBreakdown(
        dram=stats.dram_bits * e.pj_per_bit_dram / PJ_PER_UJ,
        sram=stats.sram_bits * e.pj_per_bit_sram / PJ_PER_UJ,
        pu=stats.bitops * e.pj_per_bitop / PJ_PER_UJ,
        leakage=leak_pj / PJ_PER_UJ,
    )
