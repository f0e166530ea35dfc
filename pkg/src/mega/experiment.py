"""Sweep harness: quantize, encode, partition and simulate over a config lattice."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

from . import codec
from .errors import ConfigError, MegaError
from .graph import Graph, get_preset, load_graph, synth_graph
from .model import (
    ForwardResult,
    QuantSettings,
    forward,
    get_model_preset,
    init_weights,
    layer_specs,
    prepare_graph,
)
from .partition import PartitionPlan, partition_graph
from .quant import QuantizedFeatures
from .sim import HwConfig, RunConfig, simulate
from .sim.engine import PSUM_BITS_QUANT, SimReport

AXES = ("format", "schedule", "lengths", "target_bits", "lam", "k", "model")

DEFAULT_SPEC = {
    "name": "experiment",
    "seed": 0,
    "graph": {"preset": "cora", "coupling": 0.0},
    "model": "gcn",
    "quant": {"target_bits": 2.5, "lam": 1000.0},
    "codec": {"lengths": [64, 128, 192]},
    "partition": {"k": "auto", "method": "bfs_greedy"},
    "run": {"format": "adaptive", "schedule": "condense"},
    "hw": {},
    "sweep": {},
}

CSV_FIELDS = [
    "fingerprint", "name", "status", "error", "format", "schedule", "model", "k", "lengths",
    "target_bits", "lam", "avg_bits", "compression_ratio",
    "bits_dense", "bits_bitmap", "bits_csr", "bits_fixed_package", "bits_adaptive", "bits_ideal",
    "padding_bits", "num_packages",
]


def _deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_spec(spec: dict, seed: Optional[int] = None) -> dict:
    """Fill defaults, apply a seed override and validate file references."""
    if "spec" in spec and "points" in spec:  # a previously written bundle
        spec = spec["spec"]
    unknown = set(spec) - set(DEFAULT_SPEC)
    if unknown:
        raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
    out = _deep_update(DEFAULT_SPEC, spec)
    if seed is not None:
        out["seed"] = int(seed)
    gsrc = out["graph"]
    if "edges" in gsrc or "features" in gsrc:
        for key in ("edges", "features"):
            if key not in gsrc:
                raise ConfigError(f"graph source needs both 'edges' and 'features', missing {key!r}")
            if not Path(gsrc[key]).is_file():
                raise ConfigError(f"graph file {gsrc[key]} does not exist")
        gsrc.pop("preset", None)
    part = out["partition"]
    if part.get("method") == "import" and not Path(part.get("assignment", "")).is_file():
        raise ConfigError("partition import needs an existing 'assignment' file")
    sweep = out["sweep"]
    for axis, values in sweep.items():
        if axis not in AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis {axis!r} must be a non-empty list")
    return out


def fingerprint(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def lattice(resolved: dict) -> list:
    """One fully resolved point config per lattice element."""
    sweep = resolved["sweep"]
    axes = [a for a in AXES if a in sweep]
    points = []
    for combo in itertools.product(*(sweep[a] for a in axes)):
        p = copy.deepcopy({k: v for k, v in resolved.items() if k != "sweep"})
        for axis, value in zip(axes, combo):
            if axis in ("format", "schedule"):
                p["run"][axis] = value
            elif axis == "lengths":
                p["codec"]["lengths"] = list(value)
            elif axis in ("target_bits", "lam"):
                if p["quant"] == "fp32":
                    p["quant"] = {}
                p["quant"][axis] = value
            elif axis == "k":
                p["partition"]["k"] = value
            elif axis == "model":
                p["model"] = value
        points.append(p)
    return points


# --------------------------------------------------------------------------
# stage caches (per process)
# --------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _graph_cached(gjson: str, seed: int) -> Graph:
    gsrc = json.loads(gjson)
    if "edges" in gsrc:
        return load_graph(gsrc["edges"], gsrc["features"], gsrc.get("normalization", "gcn_sym"))
    overrides = gsrc.get("overrides", {})
    preset = get_preset(gsrc.get("preset", "cora"), **overrides)
    return synth_graph(preset, seed=seed, degree_feature_coupling=float(gsrc.get("coupling", 0.0)))


@lru_cache(maxsize=8)
def _model_graph(gjson: str, seed: int, model: str) -> Graph:
    return prepare_graph(_graph_cached(gjson, seed), get_model_preset(model), seed)


@lru_cache(maxsize=16)
def _forward_cached(gjson: str, seed: int, model: str, qjson: str) -> ForwardResult:
    g = _model_graph(gjson, seed, model)
    mp = get_model_preset(model)
    specs = layer_specs(mp, g.feature_dim)
    weights = init_weights(specs, seed)
    q = json.loads(qjson)
    settings = None if q is None else QuantSettings(float(q["target_bits"]), float(q["lam"]), seed)
    return forward(g, specs, weights, settings)


@lru_cache(maxsize=16)
def _plan_cached(gjson: str, seed: int, model: str, pjson: str, f2: int, agg_bytes: int) -> PartitionPlan:
    g = _model_graph(gjson, seed, model)
    part = json.loads(pjson)
    k = part.get("k", "auto")
    if k == "auto":
        k = auto_subgraphs(g.num_nodes, f2, agg_bytes)
    return partition_graph(g, int(k), part.get("method", "bfs_greedy"),
                           assignment_path=part.get("assignment"), seed=int(part.get("seed", seed)))


def auto_subgraphs(n: int, f2: int, aggregation_buffer: int) -> int:
    """Fewest subgraphs whose 16-bit partial sums fit the Aggregation Buffer."""
    rows = max(aggregation_buffer // (f2 * PSUM_BITS_QUANT // 8), 1)
    return max(1, min(n, math.ceil(n / rows)))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def run_point(point: dict) -> dict:
    """Run one lattice point; stage errors are captured, not raised."""
    fp = fingerprint(point)
    row = {f: "" for f in CSV_FIELDS}
    run = point["run"]
    row.update(fingerprint=fp, name=point["name"], format=run["format"], schedule=run["schedule"],
               model=point["model"], lengths="/".join(str(x) for x in point["codec"]["lengths"]))
    quant = point["quant"]
    if quant != "fp32":
        row.update(target_bits=quant.get("target_bits", ""), lam=quant.get("lam", ""))
    result = {"fingerprint": fp, "config": point, "status": "ok", "error": None, "report": None}
    try:
        seed = int(point["seed"])
        gjson = _dump(point["graph"])
        fmt = run["format"]
        quantized = fmt != "dense32"
        if quantized and quant == "fp32":
            raise ConfigError(f"format {fmt} needs quantized features, but quant is 'fp32'")
        qjson = _dump(None if not quantized else {"target_bits": quant["target_bits"], "lam": quant["lam"]})
        fwd = _forward_cached(gjson, seed, point["model"], qjson)
        g = _model_graph(gjson, seed, point["model"])
        lengths = codec.check_lengths(point["codec"]["lengths"])
        specs = tuple(li.spec for li in fwd.inputs)
        hw = HwConfig.from_dict(point["hw"])
        rc = RunConfig(fmt, run["schedule"], quantized, specs, lengths)
        plan = None
        if rc.schedule != "naive":
            f2 = max(s.out_dim for s in specs)
            plan = _plan_cached(gjson, seed, point["model"], _dump(point["partition"]), f2,
                                hw.buffer_bytes["aggregation"])
            row["k"] = plan.num_subgraphs
        if quantized:
            row["avg_bits"] = repr(fwd.average_bits())
            row["compression_ratio"] = repr(32.0 / fwd.average_bits())
            q0 = fwd.inputs[0].quantized
            rep = codec.storage_report(q0, lengths)
            row.update(bits_dense=rep.bits_dense, bits_bitmap=rep.bits_bitmap, bits_csr=rep.bits_csr,
                       bits_fixed_package=rep.bits_fixed_package, bits_adaptive=rep.bits_adaptive,
                       bits_ideal=rep.bits_ideal, padding_bits=rep.padding_bits,
                       num_packages=rep.num_packages)
        report = simulate(g, fwd.inputs, hw, rc, plan)
        result["report"] = report.to_dict()
        if report.partial:
            result["status"], result["error"] = "partial", report.error
        row.update({k: (repr(v) if isinstance(v, float) else v) for k, v in report.flat().items()})
    except (MegaError, OSError) as exc:
        result["status"] = "error"
        result["error"] = f"{type(exc).__name__}: {exc}"
    row["status"] = result["status"]
    row["error"] = result["error"] or ""
    result["row"] = row
    return result


def _sim_fields() -> list:
    return list(SimReport().flat())


def rows_to_csv(rows: Sequence[dict]) -> str:
    fields = CSV_FIELDS + [f for f in _sim_fields() if f not in CSV_FIELDS]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({f: r.get(f, "") for f in fields})
    return buf.getvalue()


def run_experiment(spec: dict, out_dir=None, *, seed: Optional[int] = None, jobs: int = 1) -> dict:
    """Run every lattice point and return the bundle; also write it when ``out_dir`` is set."""
    resolved = resolve_spec(spec, seed)
    points = lattice(resolved)
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_point, points))
    else:
        results = [run_point(p) for p in points]
    results.sort(key=lambda r: r["fingerprint"])
    bundle = {
        "spec": resolved,
        "points": [{k: r[k] for k in ("fingerprint", "config", "status", "error", "report")} for r in results],
    }
    csv_text = rows_to_csv([r["row"] for r in results])
    if out_dir is not None:
        out = Path(out_dir)
        (out / "points").mkdir(parents=True, exist_ok=True)
        for r in results:
            (out / "points" / f"{r['fingerprint']}.json").write_text(
                json.dumps({k: r[k] for k in ("fingerprint", "config", "status", "error", "report", "row")},
                           indent=2, sort_keys=True), encoding="utf-8")
        (out / "results.csv").write_text(csv_text, encoding="utf-8")
        (out / "bundle.json").write_text(json.dumps(bundle, indent=2, sort_keys=True), encoding="utf-8")
    bundle["csv"] = csv_text
    return bundle


# --------------------------------------------------------------------------
# storage reports
# --------------------------------------------------------------------------

COMPARED_FORMATS = ("dense", "bitmap", "csr", "fixed_package", "adaptive", "ideal")


def storage_comparison(q, lengths=codec.DEFAULT_LENGTHS, label: str = "") -> str:
    """Per-format storage normalized to 8-bit dense, one CSV row per format.

    ``q`` is one QuantizedFeatures or a list of them (summed, e.g. over layers).
    """
    qs = [q] if isinstance(q, QuantizedFeatures) else list(q)
    totals = dict.fromkeys(COMPARED_FORMATS, 0)
    for item in qs:
        rep = codec.storage_report(item, lengths)
        for fmt in COMPARED_FORMATS:
            totals[fmt] += rep.bits(fmt)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "format", "bits", "ratio_to_dense"])
    for fmt in COMPARED_FORMATS:
        ratio = totals[fmt] / totals["dense"] if totals["dense"] else 0.0
        w.writerow([label, fmt, totals[fmt], repr(ratio)])
    return buf.getvalue()


def length_sweep(q: QuantizedFeatures, settings: Sequence[Sequence[int]], label: str = "") -> str:
    """bits_adaptive and padding per (short, medium, long) setting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "lengths", "bits_adaptive", "padding_bits", "num_packages", "ratio_to_dense"])
    for lengths in settings:
        rep = codec.storage_report(q, codec.check_lengths(lengths))
        w.writerow([label, "/".join(str(x) for x in lengths), rep.bits_adaptive, rep.padding_bits,
                    rep.num_packages, repr(rep.bits_adaptive / rep.bits_dense if rep.bits_dense else 0.0)])
    return buf.getvalue()


# name used by the build contract
fig4_report = storage_comparison
