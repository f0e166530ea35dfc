import json

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from conftest import TWO_PART_ASSIGNMENT
from mega.errors import ConfigError, ScheduleError
from mega.graph import get_preset, synth_graph
from mega.model import QuantSettings, forward, init_weights
from mega.partition import partition_graph, plan_from_assignment
from mega.sim import (
    CAUSES,
    ActivityCounters,
    HwConfig,
    LayerInput,
    LayerSpec,
    RunConfig,
    aggregation_cycles,
    combination_cycles,
    dump_config,
    energy_report,
    load_config,
    run_pipeline,
    simulate,
)
from mega.sim import engine


def bse_trace(nnz, n, b):
    """Cycle-by-cycle replay of one C-PE pair.

    Cycle 0 loads the first bit group. The left C-PE ANDs group ``g`` bit
    ``t`` at cycle ``1 + g*b + t``; the right C-PE reuses that bit one
    cycle later. Returns (finish cycle, active BSE-cycles).
    """
    if nnz == 0:
        return 0, 0
    groups = -(-nnz // n)
    events = []
    for g in range(groups):
        for t in range(b):
            c = 1 + g * b + t
            events.append(("left", c))
            events.append(("right", c + 1))
    end = max(c for _, c in events) + 1
    return end, len(events)


def small_hw(**over):
    return HwConfig.from_dict(over)


def test_two_by_two_microtrace():
    hw = small_hw(bses_per_cpe=2, cpes_per_tile=2)
    end, active = bse_trace(2, 2, 2)
    assert (end, active) == (4, 4)
    assert combination_cycles(2, 2, hw) == end


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 300), st.integers(1, 64), st.integers(1, 8))
def test_combination_cycles_match_trace(nnz, n, b):
    hw = small_hw(bses_per_cpe=n)
    assert combination_cycles(nnz, b, hw) == bse_trace(nnz, n, b)[0]


@pytest.mark.parametrize("edges,f2,units,expected", [
    (4, 128, 256, 2),
    (0, 128, 256, 0),
    (1, 256, 256, 1),
    (3, 512, 256, 6),
])
def test_aggregation_cycles(edges, f2, units, expected):
    assert aggregation_cycles(edges, f2, small_hw(agg_units=units)) == expected


def serial_oracle(fetch, comb, agg, latency):
    return latency + sum(fetch) + sum(comb) + sum(agg)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50)), min_size=1, max_size=30),
       st.integers(0, 100))
def test_pipeline_bounds(items, latency):
    fetch, comb, agg = (list(x) for x in zip(*items))
    res = run_pipeline(fetch, comb, agg, latency)
    assert res.cycles <= serial_oracle(fetch, comb, agg, latency)
    assert res.cycles >= max(sum(fetch), sum(comb), sum(agg))
    if sum(fetch) == 0 and latency == 0:
        assert res.stall == 0


def test_pipeline_two_items_by_hand():
    # fetch 5 / comb 3 / agg 1 twice: second fetch overlaps first comb
    res = run_pipeline([5, 5], [3, 3], [1, 1])
    assert res.cycles == 5 + 5 + 3 + 1
    assert res.stall == 5 + 2


# --------------------------------------------------------------------------
# whole-simulator properties
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workload():
    g = synth_graph(get_preset("cora", num_nodes=300, num_edges=1200, feature_len=64), seed=1)
    specs = (LayerSpec(64, 32, "add"), LayerSpec(32, 16, "add"))
    ws = init_weights(specs, 0)
    fq = forward(g, specs, ws, QuantSettings(2.5, 1e3, 0))
    ff = forward(g, specs, ws, None)
    plan = partition_graph(g, 4)
    return g, specs, fq, ff, plan


def _run(workload, fmt="adaptive", schedule="condense", hw=None):
    g, specs, fq, ff, plan = workload
    inputs = ff.inputs if fmt == "dense32" else fq.inputs
    run = RunConfig(fmt, schedule, fmt != "dense32", specs)
    return simulate(g, inputs, hw or HwConfig.from_dict(), run, None if schedule == "naive" else plan)


@pytest.mark.parametrize("fmt", ["dense32", "bitmap8", "adaptive"])
@pytest.mark.parametrize("schedule", ["naive", "partitioned", "condense"])
def test_report_invariants(workload, fmt, schedule):
    a = _run(workload, fmt, schedule)
    b = _run(workload, fmt, schedule)
    assert a.to_json() == b.to_json()
    assert not a.partial
    assert a.dram_bytes == sum(a.dram_accesses[c]["bytes"] for c in CAUSES)
    for c in CAUSES:
        assert a.dram_accesses[c]["bytes"] == a.dram_accesses[c]["count"] * a.granularity
    serial = a.cycles_fetch_only + a.cycles_combination_only + a.cycles_aggregation_only
    assert a.cycles_total <= serial
    assert 0 <= a.cycles_stall_dram <= a.cycles_total
    ideal = _run(workload, fmt, schedule, HwConfig.from_dict().ideal_dram())
    assert ideal.cycles_stall_dram == 0
    assert ideal.dram_accesses == a.dram_accesses
    assert ideal.cycles_total <= a.cycles_total


def test_lower_bandwidth_never_faster(workload):
    fast = _run(workload)
    slow = _run(workload, hw=HwConfig.from_dict({"dram": {"bandwidth_gbps": 4.0}}))
    assert slow.cycles_total >= fast.cycles_total
    assert slow.cycles_stall_dram >= fast.cycles_stall_dram


def test_compressed_formats_move_fewer_feature_bytes(workload):
    dense = _run(workload, "dense32", "naive").dram_accesses["features"]["bytes"]
    bitmap = _run(workload, "bitmap8", "naive").dram_accesses["features"]["bytes"]
    adaptive = _run(workload, "adaptive", "naive").dram_accesses["features"]["bytes"]
    assert adaptive < bitmap < dense


def test_condense_reduces_sparse_traffic_only(workload):
    part = _run(workload, schedule="partitioned")
    cond = _run(workload, schedule="condense")
    assert cond.dram_accesses["sparse_connections"]["count"] <= part.dram_accesses["sparse_connections"]["count"]
    for c in CAUSES:
        if c != "sparse_connections":
            assert cond.dram_accesses[c] == part.dram_accesses[c]


def test_two_part_condense_in_simulator(two_part_graph):
    g = two_part_graph
    spec = LayerSpec(4, 16, "add")
    inputs = [LayerInput(spec, g.features)]
    plan = plan_from_assignment(g, TWO_PART_ASSIGNMENT)
    reports = {s: simulate(g, inputs, HwConfig.from_dict(), RunConfig("dense32", s, False, (spec,)), plan)
               for s in ("partitioned", "condense")}
    assert reports["partitioned"].dram_accesses["sparse_connections"]["count"] == 2
    assert reports["condense"].dram_accesses["sparse_connections"]["count"] == 1
    for c in CAUSES:
        if c != "sparse_connections":
            assert reports["partitioned"].dram_accesses[c] == reports["condense"].dram_accesses[c]


def test_energy_linear_in_counters():
    hw = HwConfig.from_dict()
    a = ActivityCounters(dram_bits=1000, sram_bits=300, bitops=7000, cycles=50)
    b = ActivityCounters(dram_bits=2000, sram_bits=600, bitops=14000, cycles=100)
    ea, eb = energy_report(a, hw), energy_report(b, hw)
    for k in ("dram", "sram", "pu", "leakage"):
        assert getattr(eb, k) == pytest.approx(2 * getattr(ea, k))
    assert ea.dram == pytest.approx(1000 * 7.0 / 1e6)
    assert ea.leakage == pytest.approx(20e-3 * 50e-9 * 1e6)


def test_leakage_only_with_zero_activity():
    e = energy_report(ActivityCounters(cycles=1000), HwConfig.from_dict())
    assert e.dram == e.sram == e.pu == 0.0
    assert e.total == e.leakage > 0


def test_report_serializations(workload):
    r = _run(workload)
    d = json.loads(json.dumps(r.to_dict()))
    assert d["dram_total"]["bytes"] == r.dram_bytes
    lines = r.csv_row().splitlines()
    assert len(lines) == 2 and "dram_features_count" in lines[0]
    assert r.energy["dram"] == pytest.approx(r.dram_bytes * 8 * 7.0 / 1e6)


def test_tiny_input_buffer_is_config_error(workload):
    with pytest.raises(ConfigError, match="input buffer"):
        _run(workload, "dense32", "naive", HwConfig.from_dict({"buffer_bytes": {"input": 64}}))


def test_schedule_without_plan_is_config_error(workload):
    g, specs, fq, _, _ = workload
    with pytest.raises(ConfigError):
        simulate(g, fq.inputs, HwConfig.from_dict(), RunConfig("adaptive", "condense", True, specs), None)


def test_unknown_hw_field_rejected():
    with pytest.raises(ConfigError):
        HwConfig.from_dict({"tile": 4})
    with pytest.raises(ConfigError):
        HwConfig.from_dict({"tiles": 0})


def test_adaptive_needs_quantization():
    with pytest.raises(ConfigError):
        RunConfig("adaptive", "naive", False)


def test_midrun_error_gives_partial_report(workload, monkeypatch):
    calls = []
    real = engine._simulate_layer

    def flaky(*args):
        if calls:
            raise ScheduleError("injected")
        calls.append(1)
        real(*args)

    monkeypatch.setattr(engine, "_simulate_layer", flaky)
    r = _run(workload)
    assert r.partial and "injected" in r.error
    assert r.cycles_total > 0


def test_config_file_roundtrip(tmp_path):
    hw = HwConfig.from_dict({"tiles": 2})
    run = RunConfig("bitmap8", "partitioned", True, ((8, 4, "add"),), (64, 128, 256))
    path = tmp_path / "cfg.json"
    path.write_text(dump_config(hw, run))
    hw2, run2 = load_config(path)
    assert hw2 == hw and run2 == run


def test_defaults_env_override(tmp_path, monkeypatch):
    from mega.sim import load_defaults
    d = load_defaults()
    d["tiles"] = 3
    path = tmp_path / "d.json"
    path.write_text(json.dumps(d))
    monkeypatch.setenv("MEGA_DEFAULTS", str(path))
    assert HwConfig.from_dict().tiles == 3


def test_single_isolated_node():
    from mega.graph import build_graph
    g = build_graph(1, [], [], np.ones((1, 8)), "add")
    spec = LayerSpec(8, 4, "add")
    r = simulate(g, [LayerInput(spec, g.features)], HwConfig.from_dict(), RunConfig("dense32", "naive", False, (spec,)))
    # the self loop is the node's only aggregation work
    assert r.cycles_aggregation_only <= 1
    assert r.cycles_combination_only > 0 and r.cycles_fetch_only > 0


def test_wide_group_formula():
    assert combination_cycles(64, 3, HwConfig.from_dict({"bses_per_cpe": 32})) == 6 + 2
    assert combination_cycles(0, 3, HwConfig.from_dict()) == 0


def test_dram_energy_tracks_bytes(workload):
    a = _run(workload, "adaptive", "condense")
    d = _run(workload, "dense32", "condense")
    assert a.energy["dram"] / d.energy["dram"] == pytest.approx(a.dram_bytes / d.dram_bytes, rel=1e-6)


def test_doubling_dram_bits_doubles_dram_energy():
    hw = HwConfig.from_dict()
    one = energy_report(ActivityCounters(dram_bits=12345), hw).dram
    two = energy_report(ActivityCounters(dram_bits=24690), hw).dram
    assert two == 2 * one
