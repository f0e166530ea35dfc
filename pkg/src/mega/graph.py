"""Graph ingestion, degree analysis and synthetic workload generation.

Adjacency is kept in compressed-sparse-column form with the convention
``A[dst, src]``: column ``j`` lists every node that aggregates from node
``j``. That is the order in which the outer-product aggregation consumes a
freshly combined node, so the simulator can walk a column per produced node.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NodeRangeError, ParseError

NORMALIZATIONS = ("gcn_sym", "add", "mean")

FEATURE_MAGIC = b"MEGF"
_FEATURE_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    num_nodes: int
    num_edges: int
    feature_len: int
    avg_degree: float
    feature_sparsity: float

    def __post_init__(self):
        if min(self.num_nodes, self.num_edges, self.feature_len) <= 0:
            raise ConfigError(f"preset {self.name!r}: counts must be positive")
        if not 0.0 <= self.feature_sparsity < 1.0:
            raise ConfigError(f"preset {self.name!r}: sparsity must be in [0, 1)")


# Node/edge/feature counts and average degree follow the published dataset
# statistics. Sparsity targets are the well-known input-feature sparsities of
# the public datasets (bag-of-words for the citation graphs, dense embeddings
# for Reddit); they only steer the synthetic generator.
PRESETS = {
    "cora": DatasetPreset("cora", 2708, 10556, 1433, 3.90, 0.9873),
    "citeseer": DatasetPreset("citeseer", 3327, 9104, 3703, 2.74, 0.9915),
    "pubmed": DatasetPreset("pubmed", 19717, 88648, 500, 4.50, 0.8998),
    "nell": DatasetPreset("nell", 65755, 251550, 61278, 3.83, 0.9999),
    "reddit": DatasetPreset("reddit", 232965, 114615892, 602, 491.99, 0.0),
}


def get_preset(name: str, **overrides) -> DatasetPreset:
    """Look up a preset by (case-insensitive) name, optionally overriding fields."""
    try:
        preset = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if overrides:
        if ("num_nodes" in overrides or "num_edges" in overrides) and "avg_degree" not in overrides:
            n = overrides.get("num_nodes", preset.num_nodes)
            overrides = dict(overrides, avg_degree=overrides.get("num_edges", preset.num_edges) / n)
        preset = dataclasses.replace(preset, **overrides)
    return preset


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed graph with a normalized CSC adjacency and dense node features.

    ``src``/``dst`` hold the deduplicated raw edges (no normalization, no
    added self loops); ``indptr``/``indices``/``weights`` hold the normalized
    adjacency that aggregation multiplies with.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    features: np.ndarray
    normalization: str = "gcn_sym"

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def adj_nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def adjacency(self) -> sp.csc_matrix:
        n = self.num_nodes
        return sp.csc_matrix((self.weights, self.indices, self.indptr), shape=(n, n))

    def out_neighbors(self, j: int) -> np.ndarray:
        """Destinations aggregated from node ``j`` (one CSC column)."""
        return self.indices[self.indptr[j]:self.indptr[j + 1]]

    def with_features(self, features: np.ndarray) -> "Graph":
        features = np.asarray(features)
        if features.shape[0] != self.num_nodes:
            raise ConfigError("feature rows must equal num_nodes")
        return dataclasses.replace(self, features=features)

    def check(self) -> None:
        """Assert the CSC structural invariants; raises AssertionError."""
        assert self.indptr.shape == (self.num_nodes + 1,)
        assert self.indptr[0] == 0
        assert np.all(np.diff(self.indptr) >= 0)
        assert self.indptr[-1] == self.indices.shape[0] == self.weights.shape[0]
        if self.indices.size:
            assert self.indices.min() >= 0 and self.indices.max() < self.num_nodes


@dataclass(frozen=True)
class DegreeProfile:
    in_degree: np.ndarray
    max_degree: int


def degree_profile(g: Graph) -> DegreeProfile:
    """In-degree of every node over the raw (un-normalized) edges."""
    deg = np.bincount(g.dst, minlength=g.num_nodes).astype(np.int64)
    return DegreeProfile(in_degree=deg, max_degree=int(deg.max()) if deg.size else 0)


def _dedup_edges(src: np.ndarray, dst: np.ndarray, n: int):
    key = np.unique(src.astype(np.int64) * n + dst.astype(np.int64))
    return key // n, key % n


def build_graph(num_nodes: int, src, dst, features, normalization: str = "gcn_sym") -> Graph:
    """Assemble a :class:`Graph` from raw directed edges ``src -> dst``.

    Duplicate edges collapse to one. ``gcn_sym`` computes
    ``D^-1/2 (A + I) D^-1/2`` with ``D`` the self-loop-augmented in-degree;
    an explicit self edge in the input does not count twice. ``add`` keeps
    unit weights and ``mean`` divides each incoming edge by the destination's
    in-degree.
    """
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    n = int(num_nodes)
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if src.shape != dst.shape:
        raise ConfigError("src and dst must have the same length")
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
        raise NodeRangeError(f"edge endpoint outside [0, {n})")
    src, dst = _dedup_edges(src, dst, n)

    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != n:
        raise ConfigError(f"features must be a {n} x F matrix, got shape {features.shape}")

    rows, cols = dst, src
    if normalization == "gcn_sym":
        loops = np.arange(n, dtype=np.int64)
        key = np.unique(np.concatenate([rows * n + cols, loops * n + loops]))
        rows, cols = key // n, key % n
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    elif normalization == "add":
        vals = np.ones(rows.shape[0], dtype=np.float64)
    else:
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        vals = 1.0 / deg[rows] if rows.size else np.zeros(0)

    adj = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return Graph(
        num_nodes=n,
        src=src,
        dst=dst,
        indptr=adj.indptr.astype(np.int64),
        indices=adj.indices.astype(np.int64),
        weights=adj.data.astype(np.float64),
        features=features,
        normalization=normalization,
    )


def renormalize(g: Graph, normalization: str) -> Graph:
    return build_graph(g.num_nodes, g.src, g.dst, g.features, normalization)


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    n, f = features.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, n, f))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise ParseError("truncated feature header", path)
    magic, n, f = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", path)
    expected = _FEATURE_HEADER.size + 4 * n * f
    if len(data) != expected:
        raise ParseError(f"feature payload is {len(data)} bytes, expected {expected}", path)
    arr = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size, count=n * f)
    return arr.reshape(n, f).astype(np.float32)


def read_edge_list(path, num_nodes: Optional[int] = None):
    """Parse ``src dst`` lines; ``#`` lines and blank lines are skipped."""
    src, dst = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'src dst', got {line!r}", path, lineno)
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer node id in {line!r}", path, lineno) from None
            if s < 0 or d < 0:
                raise ParseError(f"negative node id in {line!r}", path, lineno)
            if num_nodes is not None and (s >= num_nodes or d >= num_nodes):
                raise NodeRangeError(f"{path}:{lineno}: node id {max(s, d)} >= N={num_nodes}")
            src.append(s)
            dst.append(d)
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)


def write_edge_list(path, g: Graph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {g.num_nodes} nodes, {g.num_edges} edges\n")
        for s, d in zip(g.src.tolist(), g.dst.tolist()):
            fh.write(f"{s} {d}\n")


def load_graph(edge_list_path, features_path, normalization: str = "gcn_sym") -> Graph:
    """Load a graph; N is the row count declared by the feature file."""
    features = read_features(features_path)
    src, dst = read_edge_list(edge_list_path, num_nodes=features.shape[0])
    return build_graph(features.shape[0], src, dst, features, normalization)


# --------------------------------------------------------------------------
# Synthetic workloads
# --------------------------------------------------------------------------

def _power_law_weights(rng: np.random.Generator, n: int, exponent: float, max_weight: float):
    # Pareto tail with P(w > x) ~ x^-(exponent-1); rescaled later to hit the edge count.
    w = rng.pareto(exponent - 1.0, size=n) + 1.0
    return np.minimum(w, max_weight)


def _sample_edges(rng: np.random.Generator, n: int, m: int, dst_weights: np.ndarray):
    """Draw ``m`` distinct non-loop edges, destinations weighted by ``dst_weights``."""
    p = dst_weights / dst_weights.sum()
    if n * (n - 1) <= 4 * m or n * (n - 1) <= 200_000:
        # dense regime: weighted choice over every ordered pair
        s = np.repeat(np.arange(n), n)
        d = np.tile(np.arange(n), n)
        keep = s != d
        s, d = s[keep], d[keep]
        pp = p[d]
        pick = rng.choice(s.size, size=m, replace=False, p=pp / pp.sum())
        return s[pick], d[pick]

    keys = np.empty(0, dtype=np.int64)
    order = np.empty(0, dtype=np.int64)
    drawn = 0
    while keys.size < m:
        batch = int((m - keys.size) * 1.3) + 64
        s = rng.integers(0, n, size=batch)
        d = rng.choice(n, size=batch, p=p)
        ok = s != d
        new = s[ok] * n + d[ok]
        allk = np.concatenate([keys, new])
        allo = np.concatenate([order, drawn + np.arange(new.size)])
        drawn += new.size
        # keep the first draw of each pair so truncation is seed-stable
        uniq, first = np.unique(allk, return_index=True)
        keys, order = uniq, allo[first]
    sel = np.argsort(order, kind="stable")[:m]
    keys = keys[sel]
    return keys // n, keys % n


def synth_graph(
    preset: DatasetPreset,
    seed: int,
    degree_feature_coupling: float = 0.0,
    normalization: str = "gcn_sym",
    exponent: float = 2.2,
) -> Graph:
    """Generate a power-law graph and features matching ``preset``.

    Destinations are drawn with probability proportional to a heavy-tailed
    per-node attractiveness (preferential attachment without growth), sources
    uniformly; duplicate pairs and self loops are rejected until exactly
    ``preset.num_edges`` edges exist. Features are Gaussian, thresholded so
    that ``preset.feature_sparsity`` of the entries are zero, and row ``i`` is
    then scaled by ``(1 + in_degree_i) ** degree_feature_coupling``.
    """
    n, m, f = preset.num_nodes, preset.num_edges, preset.feature_len
    if degree_feature_coupling < 0:
        raise ConfigError("degree_feature_coupling must be >= 0")
    if m > n * (n - 1):
        raise ConfigError(f"{m} edges infeasible for {n} nodes without duplicates or loops")
    rng = np.random.default_rng(seed)

    w = _power_law_weights(rng, n, exponent, max_weight=float(n))
    src, dst = _sample_edges(rng, n, m, w)

    feats = rng.standard_normal((n, f)).astype(np.float32)
    zeros = int(round(preset.feature_sparsity * n * f))
    if zeros > 0:
        flat = feats.reshape(-1)
        idx = np.argpartition(np.abs(flat), zeros - 1)[:zeros]
        flat[idx] = 0.0
    deg = np.bincount(dst, minlength=n)
    if degree_feature_coupling > 0:
        feats *= ((1.0 + deg) ** degree_feature_coupling).astype(np.float32)[:, None]
    return build_graph(n, src, dst, feats, normalization)


def sample_neighbors(g: Graph, cap: int = 25, seed: int = 0, normalization: Optional[str] = None) -> Graph:
    """Keep at most ``cap`` uniformly sampled in-neighbors per destination."""
    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.random(g.num_edges), g.dst))
    dst_sorted = g.dst[order]
    starts = np.searchsorted(dst_sorted, dst_sorted, side="left")
    rank = np.arange(dst_sorted.size) - starts
    keep = order[rank < cap]
    return build_graph(g.num_nodes, g.src[keep], g.dst[keep], g.features,
                       normalization or g.normalization)
