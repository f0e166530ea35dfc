"""Command-line entry point: ``mega <subcommand>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import codec, experiment
from .errors import ConfigError, MegaError
from .graph import (
    degree_profile,
    get_preset,
    load_graph,
    synth_graph,
    write_edge_list,
    write_features,
)
from .model import QuantSettings, forward, get_model_preset, init_weights, layer_specs, prepare_graph
from .partition import condense_schedule, partition_graph, write_assignment
from .quant import QuantParams, optimize_params, quantize_features, quantize_weights
from .sim import HwConfig, RunConfig, SimReport, load_config, simulate

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2


def _add_graph_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="dataset preset for a synthetic graph (default: cora)")
    p.add_argument("--edges", help="edge list file (src dst per line)")
    p.add_argument("--features", help="feature file (MEGF float32 matrix)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coupling", type=float, default=0.0, help="degree/feature-magnitude coupling")
    p.add_argument("--normalization", default="gcn_sym", choices=["gcn_sym", "add", "mean"])


def _graph(args):
    if args.edges or args.features:
        if not (args.edges and args.features):
            raise ConfigError("--edges and --features must be given together")
        return load_graph(args.edges, args.features, args.normalization)
    preset = get_preset(args.preset or "cora")
    return synth_graph(preset, seed=args.seed, degree_feature_coupling=args.coupling,
                       normalization=args.normalization)


def _lengths(text: str) -> tuple:
    try:
        return codec.check_lengths(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")


def _weights(g, hidden: int, seed: int):
    rng = np.random.default_rng(seed)
    lim = np.sqrt(6.0 / (g.feature_dim + hidden))
    return rng.uniform(-lim, lim, size=(g.feature_dim, hidden))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    g = _graph(args)
    write_edge_list(args.out_edges, g)
    write_features(args.out_features, g.features)
    print(f"wrote {g.num_nodes} nodes, {g.num_edges} edges, {g.feature_dim} features")
    return EXIT_OK


def cmd_quantize(args) -> int:
    g = _graph(args)
    Wq = quantize_weights(_weights(g, args.hidden, args.seed))
    m_target = args.m_target if args.m_target is not None else g.num_nodes * g.feature_dim * args.target_bits / 8192
    res = optimize_params(g, Wq, m_target, args.lam, args.seed)
    Path(args.out).write_text(res.params.to_json() + "\n", encoding="utf-8")
    q = quantize_features(g.features, degree_profile(g), res.params)
    avg = float(np.mean(q.node_bitwidth))
    print(json.dumps({"m_target_kb": m_target, "memory_kb": res.memory_kb, "proxy_mse": res.proxy_mse,
                      "feasible": res.feasible, "avg_bits": avg}, sort_keys=True))
    if not res.feasible:
        print("warning: m_target is below the all-1-bit floor; result is best effort", file=sys.stderr)
    return EXIT_OK


def cmd_encode(args) -> int:
    g = _graph(args)
    params = QuantParams.from_json(Path(args.params).read_text(encoding="utf-8"))
    q = quantize_features(g.features, degree_profile(g), params)
    stream = codec.encode(q, args.lengths)
    codec.write_stream(args.out, stream)
    report = codec.storage_report(q, args.lengths)
    text = report.to_csv(args.label)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_partition(args) -> int:
    g = _graph(args)
    plan = partition_graph(g, args.k, args.method, assignment_path=args.assignment, seed=args.seed)
    if args.out:
        write_assignment(args.out, plan.sub_of)
    if args.layout:
        layout = condense_schedule(plan, np.arange(g.num_nodes), args.node_bytes, align=args.granularity)
        layout.write_csv(args.layout)
    print(json.dumps({"subgraphs": plan.num_subgraphs, "sparse_connections": plan.num_sparse_connections()}))
    return EXIT_OK


def _write_report(report: SimReport, args) -> None:
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    else:
        print(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.csv_row(), encoding="utf-8")


def cmd_simulate(args) -> int:
    report = SimReport(partial=True)
    try:
        if args.config:
            hw, run = load_config(args.config)
        else:
            hw, run = HwConfig.from_dict(), RunConfig()
        if args.format:
            run = RunConfig(args.format, run.schedule, args.format != "dense32", run.layers, run.lengths)
        if args.schedule:
            run = RunConfig(run.format, args.schedule, run.quantized, run.layers, run.lengths)
        mp = get_model_preset(args.model)
        g = prepare_graph(_graph(args), mp, args.seed)
        specs = layer_specs(mp, g.feature_dim)
        if run.layers and tuple(run.layers) != specs:
            specs = run.layers
        weights = init_weights(specs, args.seed)
        quant = QuantSettings(args.target_bits, args.lam, args.seed) if run.quantized else None
        fwd = forward(g, specs, weights, quant)
        run = RunConfig(run.format, run.schedule, run.quantized, specs, run.lengths)
        plan = None
        if run.schedule != "naive":
            k = args.k or experiment.auto_subgraphs(g.num_nodes, max(s.out_dim for s in specs),
                                                    hw.buffer_bytes["aggregation"])
            method = "import" if args.assignment else "bfs_greedy"
            plan = partition_graph(g, k, method, assignment_path=args.assignment, seed=args.seed)
        report = simulate(g, fwd.inputs, hw, run, plan)
    except ConfigError as exc:
        report.error = f"ConfigError: {exc}"
        _write_report(report, args)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MegaError as exc:
        report.error = f"{type(exc).__name__}: {exc}"
        _write_report(report, args)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _write_report(report, args)
    return EXIT_ERROR if report.partial else EXIT_OK


def cmd_sweep(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep spec {args.spec}: {exc}") from None
    bundle = experiment.run_experiment(spec, args.out, seed=args.seed, jobs=args.jobs)
    failed = [p for p in bundle["points"] if p["status"] != "ok"]
    print(f"{len(bundle['points'])} points, {len(failed)} with errors -> {args.out}")
    return EXIT_ERROR if failed else EXIT_OK


def cmd_report(args) -> int:
    mp = get_model_preset(args.model)
    g = prepare_graph(_graph(args), mp, args.seed)
    specs = layer_specs(mp, g.feature_dim)
    fwd = forward(g, specs, init_weights(specs, args.seed), QuantSettings(args.target_bits, args.lam, args.seed))
    qs = [li.quantized for li in fwd.inputs]
    if args.kind == "formats":
        text = experiment.storage_comparison(qs if args.all_layers else qs[0], args.lengths, args.label or mp.name)
    else:
        settings = args.settings or [(64, 128, 192), (128, 256, 384), (256, 512, 768), (400, 512, 800)]
        text = experiment.length_sweep(qs[0], settings, args.label or mp.name)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mega", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic graph and write it to files")
    _add_graph_args(p)
    p.add_argument("--out-edges", required=True)
    p.add_argument("--out-features", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("quantize", help="fit degree-aware scales and bitwidths")
    _add_graph_args(p)
    p.add_argument("--hidden", type=int, default=128, help="output width of the layer being fit")
    p.add_argument("--target-bits", type=float, default=2.5, help="memory target as average bits")
    p.add_argument("--m-target", type=float, help="memory target in KB (overrides --target-bits)")
    p.add_argument("--lam", type=float, default=1000.0)
    p.add_argument("--out", required=True, help="QuantParams JSON")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("encode", help="quantize and write an Adaptive-Package stream")
    _add_graph_args(p)
    p.add_argument("--params", required=True)
    p.add_argument("--lengths", type=_lengths, default=codec.DEFAULT_LENGTHS)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="storage report CSV (default: stdout)")
    p.add_argument("--label", default="")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("partition", help="partition a graph and dump the condensed layout")
    _add_graph_args(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--method", default="bfs_greedy", choices=["bfs_greedy", "import"])
    p.add_argument("--assignment", help="assignment file for --method import")
    p.add_argument("--out", help="write the assignment (one subgraph id per line)")
    p.add_argument("--layout", help="write the Condense-Edge layout CSV")
    p.add_argument("--node-bytes", type=int, default=64)
    p.add_argument("--granularity", type=int, default=128)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("simulate", help="simulate one configuration")
    _add_graph_args(p)
    p.add_argument("--config", help="JSON with 'hw' and 'run' objects")
    p.add_argument("--model", default="gcn")
    p.add_argument("--format", choices=["dense32", "bitmap8", "adaptive"])
    p.add_argument("--schedule", choices=["naive", "partitioned", "condense"])
    p.add_argument("--target-bits", type=float, default=2.5)
    p.add_argument("--lam", type=float, default=1000.0)
    p.add_argument("--k", type=int, help="subgraph count (default: fit the Aggregation Buffer)")
    p.add_argument("--assignment", help="import a partition instead of computing one")
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--csv", help="also write the flat CSV row")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run an experiment lattice")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="storage comparison tables")
    _add_graph_args(p)
    p.add_argument("kind", choices=["formats", "lengths"])
    p.add_argument("--model", default="gcn")
    p.add_argument("--target-bits", type=float, default=2.5)
    p.add_argument("--lam", type=float, default=1000.0)
    p.add_argument("--lengths", type=_lengths, default=codec.DEFAULT_LENGTHS)
    p.add_argument("--settings", type=_lengths, nargs="+", help="length settings for 'lengths'")
    p.add_argument("--all-layers", action="store_true")
    p.add_argument("--label", default="")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MegaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
