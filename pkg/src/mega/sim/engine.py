"""Phase-analytic traffic, timing and energy model of the accelerator."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .. import codec
from ..errors import ConfigError, MegaError
from ..graph import Graph
from ..partition import PartitionPlan, condense_schedule
from ..quant import WEIGHT_BITS, QuantizedFeatures
from .config import HwConfig, LayerSpec, RunConfig
from .energy import MAC32_BITOPS, ActivityCounters, energy_report, mult_bitops
from .timing import aggregation_cycles, column_passes, combination_cycles, run_pipeline

CAUSES = ("features", "weights", "edges", "sparse_connections", "partial_sums")
EDGE_ENTRY_BYTES = 4  # 16-bit row index + 16-bit fixed-point weight
POINTER_BYTES = 4
EID_BYTES = 4
EDGE_WEIGHT_BITS = 16
PSUM_BITS_QUANT = 16


@dataclass(frozen=True, eq=False)
class LayerInput:
    """One layer's input features as the accelerator sees them."""

    spec: LayerSpec
    features: np.ndarray                       # unquantized input, N x in_dim
    quantized: Optional[QuantizedFeatures] = None

    def __post_init__(self):
        if self.features.shape[1] != self.spec.in_dim:
            raise ConfigError(
                f"layer input has {self.features.shape[1]} dims, spec says {self.spec.in_dim}"
            )
        if self.quantized is not None and self.quantized.values.shape != self.features.shape:
            raise ConfigError("quantized features do not match the layer input shape")


@dataclass
class SimReport:
    cycles_total: int = 0
    cycles_stall_dram: int = 0
    cycles_fetch_only: int = 0
    cycles_combination_only: int = 0
    cycles_aggregation_only: int = 0
    dram_accesses: dict = field(default_factory=lambda: {c: {"count": 0, "bytes": 0} for c in CAUSES})
    energy: dict = field(default_factory=lambda: {"dram": 0.0, "sram": 0.0, "pu": 0.0, "leakage": 0.0})
    utilization: dict = field(default_factory=lambda: {"combination": 0.0, "aggregation": 0.0})
    granularity: int = 0
    partial: bool = False
    error: Optional[str] = None
    config: dict = field(default_factory=dict)

    @property
    def dram_count(self) -> int:
        return sum(v["count"] for v in self.dram_accesses.values())

    @property
    def dram_bytes(self) -> int:
        return sum(v["bytes"] for v in self.dram_accesses.values())

    def to_dict(self) -> dict:
        return {
            "cycles_total": self.cycles_total,
            "cycles_stall_dram": self.cycles_stall_dram,
            "cycles_fetch_only": self.cycles_fetch_only,
            "cycles_combination_only": self.cycles_combination_only,
            "cycles_aggregation_only": self.cycles_aggregation_only,
            "dram_accesses": self.dram_accesses,
            "dram_total": {"count": self.dram_count, "bytes": self.dram_bytes},
            "energy": self.energy,
            "utilization": self.utilization,
            "granularity": self.granularity,
            "partial": self.partial,
            "error": self.error,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def flat(self) -> dict:
        row = {
            "cycles_total": self.cycles_total,
            "cycles_stall_dram": self.cycles_stall_dram,
            "cycles_fetch_only": self.cycles_fetch_only,
            "cycles_combination_only": self.cycles_combination_only,
            "cycles_aggregation_only": self.cycles_aggregation_only,
        }
        for cause in CAUSES:
            row[f"dram_{cause}_count"] = self.dram_accesses[cause]["count"]
            row[f"dram_{cause}_bytes"] = self.dram_accesses[cause]["bytes"]
        row["dram_total_count"] = self.dram_count
        row["dram_total_bytes"] = self.dram_bytes
        for k in ("dram", "sram", "pu", "leakage"):
            row[f"energy_{k}_uj"] = self.energy[k]
        row["util_combination"] = self.utilization["combination"]
        row["util_aggregation"] = self.utilization["aggregation"]
        row["partial"] = self.partial
        return row

    def csv_row(self, header: bool = True) -> str:
        buf = io.StringIO()
        row = self.flat()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(row)
        return buf.getvalue()


# --------------------------------------------------------------------------
# block accounting helpers
# --------------------------------------------------------------------------

def stream_blocks(ends: np.ndarray, granularity: int) -> np.ndarray:
    """Blocks first needed by each item of a contiguous, aligned stream.

    ``ends[i]`` is the byte offset just past item ``i``'s data.
    """
    ends = np.asarray(ends, dtype=np.int64)
    if ends.size == 0:
        return ends
    cum = -(-ends // granularity)
    return np.diff(np.concatenate([[0], cum]))


def scattered_blocks(addresses: np.ndarray, sizes: np.ndarray, granularity: int) -> np.ndarray:
    """Blocks first touched by each item when items sit at arbitrary addresses."""
    seen = set()
    out = np.zeros(len(addresses), dtype=np.int64)
    for i, (a, s) in enumerate(zip(np.asarray(addresses).tolist(), np.asarray(sizes).tolist())):
        new = 0
        for blk in range(a // granularity, (a + s - 1) // granularity + 1):
            if blk not in seen:
                seen.add(blk)
                new += 1
        out[i] = new
    return out


def _spread(total_blocks: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of ``total_blocks`` over items in proportion to ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        return np.zeros(0, dtype=np.int64)
    s = weights.sum()
    if s <= 0:
        out = np.zeros(weights.size, dtype=np.int64)
        out[-1] = total_blocks
        return out
    cum = np.floor(np.cumsum(weights) / s * total_blocks + 1e-9).astype(np.int64)
    cum[-1] = total_blocks
    return np.diff(np.concatenate([[0], cum]))


# --------------------------------------------------------------------------
# per-format input streams
# --------------------------------------------------------------------------

@dataclass
class _Stream:
    regions: list        # per region: per-node end offsets in bytes
    node_nnz: np.ndarray  # non-zeros processed per node
    node_bits: np.ndarray
    masks: Optional[sp.csr_matrix]  # non-zero pattern, None when dense

    def blocks(self, g: int) -> np.ndarray:
        out = np.zeros(self.node_nnz.size, dtype=np.int64)
        for ends in self.regions:
            out += stream_blocks(ends, g)
        return out

    def record_bytes(self) -> np.ndarray:
        out = np.zeros(self.node_nnz.size, dtype=np.int64)
        for ends in self.regions:
            out += np.diff(np.concatenate([[0], ends]))
        return out


def _bitmap_ends(n: int, f: int) -> np.ndarray:
    return -(-(np.arange(1, n + 1, dtype=np.int64) * f) // 8)


def _adaptive_ends(q: QuantizedFeatures, lengths) -> np.ndarray:
    st = codec.encode(q, lengths)
    counts = np.array([p.count for p in st.packages], dtype=np.int64)
    if counts.size == 0:
        return np.zeros(q.num_nodes, dtype=np.int64)
    pkg_vals = np.cumsum(counts)
    pkg_bytes = np.cumsum(st.package_nbytes())
    node_vals = np.cumsum(q.node_nnz().astype(np.int64))
    last = np.searchsorted(pkg_vals, node_vals - 1, side="right")
    ends = np.where(node_vals > 0, pkg_bytes[np.minimum(last, counts.size - 1)], 0)
    return np.maximum.accumulate(ends)


def build_stream(layer: LayerInput, fmt: str, lengths=codec.DEFAULT_LENGTHS) -> _Stream:
    X = layer.features
    n, f = X.shape
    if fmt == "dense32":
        return _Stream([np.arange(1, n + 1, dtype=np.int64) * f * 4],
                       np.full(n, f, dtype=np.int64), np.full(n, 32, dtype=np.int64), None)
    if fmt == "bitmap8":
        mask = sp.csr_matrix(X != 0)
        nnz = np.diff(mask.indptr).astype(np.int64)
        return _Stream([_bitmap_ends(n, f), np.cumsum(nnz)], nnz, np.full(n, 8, dtype=np.int64), mask)
    if layer.quantized is None:
        raise ConfigError("adaptive format needs quantized layer inputs")
    q = layer.quantized
    mask = sp.csr_matrix(q.values != 0)
    nnz = np.diff(mask.indptr).astype(np.int64)
    return _Stream([_bitmap_ends(n, f), _adaptive_ends(q, lengths)], nnz, q.node_bitwidth.astype(np.int64), mask)


def output_stream_blocks(next_layer: Optional[LayerInput], fmt: str, n: int, f2: int, g: int,
                         lengths=codec.DEFAULT_LENGTHS) -> int:
    """Blocks written for a layer's outputs: the next layer's input stream, or dense rows."""
    if next_layer is not None:
        return int(build_stream(next_layer, fmt, lengths).blocks(g).sum())
    bits = 32 if fmt == "dense32" else PSUM_BITS_QUANT
    return -(-(n * f2 * bits // 8) // g)


# --------------------------------------------------------------------------
# the simulator
# --------------------------------------------------------------------------

class _Counters:
    def __init__(self, g: int):
        self.g = g
        self.blocks = {c: 0 for c in CAUSES}
        self.sram_bits = 0
        self.bitops = 0
        self.cycles = 0.0
        self.stall = 0.0
        self.fetch_only = 0.0
        self.comb_only = 0.0
        self.agg_only = 0.0


def _lru_spills(dest_seq: Sequence[np.ndarray], capacity_rows: int, row_blocks: int) -> np.ndarray:
    """Partial-sum blocks moved per item by a row-granular LRU Aggregation Buffer."""
    out = np.zeros(len(dest_seq), dtype=np.int64)
    distinct = set()
    for d in dest_seq:
        distinct.update(d.tolist())
    if len(distinct) <= capacity_rows:
        return out
    lru: OrderedDict = OrderedDict()
    spilled = set()
    for i, dests in enumerate(dest_seq):
        moved = 0
        for r in dests.tolist():
            if r in lru:
                lru.move_to_end(r)
                continue
            if r in spilled:
                moved += row_blocks  # read the spilled partial sum back
                spilled.discard(r)
            if len(lru) >= capacity_rows:
                victim, _ = lru.popitem(last=False)
                spilled.add(victim)
                moved += row_blocks
            lru[r] = True
        out[i] = moved
    return out


def _weight_blocks(stream: _Stream, f1: int, f2: int, wbits: int, hw: HwConfig) -> np.ndarray:
    """Weight blocks fetched per node: once if W fits, else per input-buffer chunk."""
    n = stream.node_nnz.size
    g = hw.dram.access_granularity
    row_bytes = -(-(f2 * wbits) // 8)
    out = np.zeros(n, dtype=np.int64)
    if n == 0:
        return out
    if f1 * row_bytes <= hw.buffer_bytes["weight"]:
        out[0] = -(-(f1 * row_bytes) // g)
        return out
    half = hw.buffer_bytes["input"] // 2
    rec = stream.record_bytes()
    start, used = 0, 0
    bounds = []
    for i, r in enumerate(rec.tolist()):
        if used and used + r > half:
            bounds.append((start, i))
            start, used = i, 0
        used += r
    bounds.append((start, n))
    for a, b in bounds:
        if stream.masks is None:
            rows = np.arange(f1)
        else:
            rows = np.unique(stream.masks[a:b].indices)
        if rows.size:
            out[a] = int(scattered_blocks(rows * row_bytes, np.full(rows.size, row_bytes), g).sum())
    return out


def _check_buffers(layers: Sequence[LayerInput], run: RunConfig, hw: HwConfig, streams) -> None:
    bb = hw.buffer_bytes
    for l, (layer, st) in enumerate(zip(layers, streams)):
        f2 = layer.spec.out_dim
        rec = st.record_bytes()
        biggest = int(rec.max()) if rec.size else 0
        if run.format == "adaptive":
            biggest = max(biggest, codec.package_nbytes(2, run.lengths))
        if biggest > bb["input"] // 2:
            raise ConfigError(f"layer {l}: input buffer half ({bb['input'] // 2} B) is smaller than one node record ({biggest} B)")
        psum_bits = 32 if run.format == "dense32" else PSUM_BITS_QUANT
        if f2 * psum_bits // 8 > bb["aggregation"]:
            raise ConfigError(f"layer {l}: aggregation buffer cannot hold one partial-sum row")
        wbits = 32 if run.format == "dense32" else WEIGHT_BITS
        if -(-(f2 * wbits) // 8) > bb["weight"]:
            raise ConfigError(f"layer {l}: weight buffer cannot hold one weight row")
        brow = _b_row_bytes(f2, run.format)
        if 2 * brow > bb["combination"]:
            raise ConfigError(f"layer {l}: combination buffer cannot double-buffer one combined row")
        if run.schedule == "condense" and brow > bb["sparse"]:
            raise ConfigError(f"layer {l}: sparse buffer cannot hold one combined row")


def _b_row_bytes(f2: int, fmt: str) -> int:
    return f2 * 4 if fmt == "dense32" else -(-(f2 * WEIGHT_BITS) // 8)


def simulate(g: Graph, model: Sequence[LayerInput], hw: HwConfig, run: RunConfig,
             plan: Optional[PartitionPlan] = None) -> SimReport:
    """Run every layer and return the aggregated report.

    Stage errors after validation produce a report with ``partial=True``.
    """
    if run.schedule != "naive" and plan is None:
        raise ConfigError(f"schedule {run.schedule!r} needs a partition plan")
    if plan is not None and plan.sub_of.shape[0] != g.num_nodes:
        raise ConfigError("partition plan does not match the graph")
    if run.layers and tuple(l.spec for l in model) != tuple(run.layers):
        raise ConfigError("model layers do not match the run configuration")
    for l in range(1, len(model)):
        if model[l].spec.in_dim != model[l - 1].spec.out_dim:
            raise ConfigError(f"layer {l} input dim does not match layer {l - 1} output")
    streams = [build_stream(layer, run.format, run.lengths) for layer in model]
    _check_buffers(model, run, hw, streams)

    gran = hw.dram.access_granularity
    cnt = _Counters(gran)
    report = SimReport(granularity=gran, config={"hw": hw.to_dict(), "run": run.to_dict()})
    try:
        for l, layer in enumerate(model):
            nxt = model[l + 1] if l + 1 < len(model) else None
            _simulate_layer(g, layer, streams[l], nxt, hw, run, plan, cnt)
    except MegaError as exc:
        report.partial = True
        report.error = f"{type(exc).__name__}: {exc}"
    _finish(report, cnt, hw)
    return report


def _finish(report: SimReport, cnt: _Counters, hw: HwConfig) -> None:
    g = cnt.g
    for c in CAUSES:
        report.dram_accesses[c] = {"count": int(cnt.blocks[c]), "bytes": int(cnt.blocks[c] * g)}
    report.cycles_total = int(math.ceil(cnt.cycles - 1e-9))
    report.cycles_stall_dram = min(int(math.ceil(cnt.stall - 1e-9)), report.cycles_total)
    report.cycles_fetch_only = int(math.ceil(cnt.fetch_only - 1e-9))
    report.cycles_combination_only = int(math.ceil(cnt.comb_only - 1e-9))
    report.cycles_aggregation_only = int(math.ceil(cnt.agg_only - 1e-9))
    dram_bits = report.dram_bytes * 8
    stats = ActivityCounters(dram_bits=dram_bits, sram_bits=int(cnt.sram_bits + 2 * dram_bits),
                             bitops=int(cnt.bitops), cycles=float(report.cycles_total))
    report.energy = energy_report(stats, hw).to_dict()
    total = max(cnt.cycles, 1e-12)
    report.utilization = {
        "combination": min(cnt.comb_only / total, 1.0) if cnt.cycles > 0 else 0.0,
        "aggregation": min(cnt.agg_only / total, 1.0) if cnt.cycles > 0 else 0.0,
    }


def _run_pass(cnt: _Counters, hw: HwConfig, dram_blocks: np.ndarray, comb: np.ndarray, agg: np.ndarray) -> None:
    if dram_blocks.size == 0:
        return
    bpc = hw.bytes_per_cycle
    fetch = (dram_blocks * cnt.g / bpc).astype(np.float64) if math.isfinite(bpc) else np.zeros(dram_blocks.size)
    lat = float(hw.dram.latency_cycles) if dram_blocks.sum() > 0 else 0.0
    res = run_pipeline(fetch.tolist(), comb.astype(np.float64).tolist(), agg.astype(np.float64).tolist(), lat)
    cnt.cycles += res.cycles
    cnt.stall += res.stall
    cnt.fetch_only += res.fetch_busy + lat
    cnt.comb_only += res.comb_busy
    cnt.agg_only += res.agg_busy


def _simulate_layer(g: Graph, layer: LayerInput, stream: _Stream, nxt: Optional[LayerInput],
                    hw: HwConfig, run: RunConfig, plan: Optional[PartitionPlan], cnt: _Counters) -> None:
    n = g.num_nodes
    f1, f2 = layer.spec.in_dim, layer.spec.out_dim
    gran = cnt.g
    fmt = run.format
    dense = fmt == "dense32"
    wbits = 32 if dense else WEIGHT_BITS
    psum_bits = 32 if dense else PSUM_BITS_QUANT
    psum_row_blocks = -(-(f2 * psum_bits // 8) // gran)
    capacity_rows = hw.buffer_bytes["aggregation"] // (f2 * psum_bits // 8)
    brow = _b_row_bytes(f2, fmt)
    passes = column_passes(f2, hw)

    indptr, indices = g.indptr, g.indices
    col_len = np.diff(indptr)

    # combination activity
    feat_blocks = stream.blocks(gran)
    w_blocks = _weight_blocks(stream, f1, f2, wbits, hw)
    comb = np.array([combination_cycles(int(z), int(b), hw) * passes
                     for z, b in zip(stream.node_nnz.tolist(), stream.node_bits.tolist())], dtype=np.int64)
    if dense:
        cnt.bitops += int(stream.node_nnz.sum()) * f2 * MAC32_BITOPS
    else:
        cnt.bitops += int(np.dot(stream.node_nnz, stream.node_bits)) * f2 * wbits
    cnt.sram_bits += int(stream.node_nnz.sum()) * f2 * wbits + n * brow * 8 * 2
    agg_mult = MAC32_BITOPS if dense else mult_bitops(WEIGHT_BITS, EDGE_WEIGHT_BITS)
    cnt.bitops += int(indptr[-1]) * f2 * agg_mult
    cnt.sram_bits += int(indptr[-1]) * f2 * psum_bits * 2

    out_blocks = output_stream_blocks(nxt, fmt, n, f2, gran, run.lengths)

    if run.schedule == "naive":
        dests = [indices[indptr[j]:indptr[j + 1]] for j in range(n)]
        agg = np.array([aggregation_cycles(int(e), f2, hw) for e in col_len.tolist()], dtype=np.int64)
        ps = _lru_spills(dests, capacity_rows, psum_row_blocks)
        edge_ends = np.cumsum(col_len * EDGE_ENTRY_BYTES + POINTER_BYTES) + POINTER_BYTES
        e_blocks = stream_blocks(edge_ends, gran)
        cnt.blocks["features"] += int(feat_blocks.sum()) + out_blocks
        cnt.blocks["weights"] += int(w_blocks.sum())
        cnt.blocks["edges"] += int(e_blocks.sum())
        cnt.blocks["partial_sums"] += int(ps.sum())
        dram = feat_blocks + w_blocks + e_blocks + ps
        _run_pass(cnt, hw, np.append(dram, out_blocks), np.append(comb, 0), np.append(agg, 0))
        return

    k = plan.num_subgraphs
    sub_of = plan.sub_of
    dst_sub = sub_of[indices]
    col_of = np.repeat(np.arange(n), col_len)

    def dests_in(j: int, p: int) -> np.ndarray:
        d = indices[indptr[j]:indptr[j + 1]]
        return d[sub_of[d] == p]

    counts = sp.csr_matrix((np.ones(indices.size, dtype=np.int64), (col_of, dst_sub)), shape=(n, k)).toarray() \
        if indices.size else np.zeros((n, k), dtype=np.int64)
    out_share = _spread(out_blocks, np.bincount(sub_of, minlength=k))

    # production pass: every node combined; subgraph 0 aggregated on the fly
    e0 = counts[:, 0]
    agg0 = np.array([aggregation_cycles(int(e), f2, hw) for e in e0.tolist()], dtype=np.int64)
    ps0 = _lru_spills([dests_in(j, 0) for j in range(n)], capacity_rows, psum_row_blocks)
    edges0 = np.cumsum(e0 * EDGE_ENTRY_BYTES + POINTER_BYTES) + POINTER_BYTES + EID_BYTES * len(plan.eid_lists[0])
    e_blocks0 = stream_blocks(edges0, gran)
    bmap_blocks = stream_blocks(np.arange(1, n + 1, dtype=np.int64) * brow, gran) if k > 1 else np.zeros(n, dtype=np.int64)
    cnt.blocks["features"] += int(feat_blocks.sum()) + int(bmap_blocks.sum()) + int(out_share[0])
    cnt.blocks["weights"] += int(w_blocks.sum())
    cnt.blocks["edges"] += int(e_blocks0.sum())
    cnt.blocks["partial_sums"] += int(ps0.sum())
    dram0 = feat_blocks + w_blocks + e_blocks0 + ps0 + bmap_blocks
    _run_pass(cnt, hw, np.append(dram0, out_share[0]), np.append(comb, 0), np.append(agg0, 0))

    layout = None
    if run.schedule == "condense" and k > 1:
        layout = condense_schedule(plan, np.arange(n), brow, align=gran,
                                   region_capacity=hw.buffer_bytes["sparse"] // k or None)
        cnt.sram_bits += sum(len(o) for o in layout.order) * brow * 8 * 2

    for p in range(1, k):
        eids = plan.eid_lists[p]
        members = plan.members(p)
        if layout is not None:
            # regions start block-aligned, so the condensed read is one contiguous stream
            src_nodes = layout.order[p]
            sc_blocks = stream_blocks(np.cumsum(np.full(src_nodes.size, brow, dtype=np.int64)), gran)
        else:
            src_nodes = eids
            sc_blocks = scattered_blocks(eids * brow, np.full(eids.size, brow), gran)
        mem_blocks = scattered_blocks(members * brow, np.full(members.size, brow), gran)
        items = np.concatenate([src_nodes, members]).astype(np.int64)
        e = counts[items, p] if items.size else np.zeros(0, dtype=np.int64)
        agg = np.array([aggregation_cycles(int(x), f2, hw) for x in e.tolist()], dtype=np.int64)
        ps = _lru_spills([dests_in(int(j), p) for j in items.tolist()], capacity_rows, psum_row_blocks)
        edge_ends = np.cumsum(e * EDGE_ENTRY_BYTES + POINTER_BYTES) + POINTER_BYTES + EID_BYTES * eids.size
        e_blocks = stream_blocks(edge_ends, gran)
        cnt.blocks["sparse_connections"] += int(sc_blocks.sum())
        cnt.blocks["features"] += int(mem_blocks.sum()) + int(out_share[p])
        cnt.blocks["edges"] += int(e_blocks.sum())
        cnt.blocks["partial_sums"] += int(ps.sum())
        dram = np.concatenate([sc_blocks, mem_blocks]) + e_blocks + ps
        zeros = np.zeros(items.size + 1, dtype=np.int64)
        _run_pass(cnt, hw, np.append(dram, out_share[p]), zeros, np.append(agg, 0))
