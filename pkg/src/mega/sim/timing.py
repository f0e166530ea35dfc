"""Per-node cycle models and the three-stage ping-pong pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import HwConfig

FILL_CYCLES = 2  # load skew plus the forward hop to the right C-PE half


def combination_cycles(node_nnz: int, bits: int, hw: HwConfig) -> int:
    """Bit-serial row-product time of one node's non-zeros on one C-PE pair.

    Non-zeros are taken in groups of ``n`` (BSEs per C-PE), each group
    streaming one feature bit per cycle; the right half of the C-PEs runs
    one cycle behind the left, reusing the same bits.
    """
    if node_nnz <= 0:
        return 0
    return math.ceil(node_nnz / hw.bses_per_cpe) * bits + FILL_CYCLES


def aggregation_cycles(out_edges: int, f2: int, hw: HwConfig) -> int:
    """Outer-product accumulation of one combined row into its destinations."""
    if out_edges <= 0:
        return 0
    u = hw.agg_units
    if f2 < u:
        return math.ceil(out_edges / (u // f2))
    return out_edges * math.ceil(f2 / u)


def column_passes(f2: int, hw: HwConfig) -> int:
    """C-PE passes per row: output columns spread over every tile's C-PEs."""
    return math.ceil(math.ceil(f2 / hw.cpes_per_tile) / hw.tiles)


@dataclass
class PipelineResult:
    cycles: float
    stall: float
    fetch_busy: float
    comb_busy: float
    agg_busy: float


def run_pipeline(fetch, comb, agg, latency: float = 0.0) -> PipelineResult:
    """Fetch -> combine -> aggregate over items with two-slot buffers between stages.

    Item ``i`` may be fetched once item ``i-2`` has left the input buffer,
    and combined once item ``i-2`` has left the combination buffer. Stall is
    the time the combination stage sits idle waiting for a fetch.
    """
    n = len(fetch)
    f_end = [0.0] * n
    c_end = [0.0] * n
    a_end = [0.0] * n
    stall = 0.0
    prev_f = prev_c = prev_a = 0.0
    for i in range(n):
        slot_in = c_end[i - 2] if i >= 2 else 0.0
        start = max(prev_f, slot_in)
        if i == 0:
            start += latency
        f_end[i] = prev_f = start + fetch[i]
        ready = max(prev_c, a_end[i - 2] if i >= 2 else 0.0)
        if f_end[i] > ready:
            stall += f_end[i] - ready
        c_end[i] = prev_c = max(f_end[i], ready) + comb[i]
        a_end[i] = prev_a = max(c_end[i], prev_a) + agg[i]
    total = max(prev_a, prev_f)
    return PipelineResult(total, stall, float(sum(fetch)), float(sum(comb)), float(sum(agg)))
