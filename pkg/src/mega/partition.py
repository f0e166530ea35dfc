"""Graph partitioning, sparse-connection extraction and Condense-Edge reordering."""

from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ScheduleError
from .graph import Graph

EID_FIFO_DEPTH = 8


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    sub_of: np.ndarray
    num_subgraphs: int
    eid_lists: tuple  # per subgraph: ascending external source IDs

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.sub_of == k)

    def num_sparse_connections(self) -> int:
        return int(sum(len(e) for e in self.eid_lists))


def sparse_connections(src: np.ndarray, dst: np.ndarray, sub_of: np.ndarray, k: int) -> tuple:
    """Per-subgraph deduplicated, ascending sources of cross-subgraph edges."""
    cross = sub_of[src] != sub_of[dst]
    s, owner = src[cross], sub_of[dst[cross]]
    lists = []
    for p in range(k):
        lists.append(np.unique(s[owner == p]).astype(np.int64))
    return tuple(lists)


def plan_from_assignment(g: Graph, sub_of, num_subgraphs: Optional[int] = None) -> PartitionPlan:
    sub_of = np.asarray(sub_of, dtype=np.int64)
    if sub_of.shape != (g.num_nodes,):
        raise ConfigError(f"assignment covers {sub_of.size} nodes, graph has {g.num_nodes}")
    k = int(sub_of.max()) + 1 if num_subgraphs is None else int(num_subgraphs)
    if sub_of.size and (sub_of.min() < 0 or sub_of.max() >= k):
        raise ConfigError(f"subgraph ids must lie in [0, {k})")
    return PartitionPlan(sub_of, k, sparse_connections(g.src, g.dst, sub_of, k))


def _undirected_neighbors(g: Graph):
    s = np.concatenate([g.src, g.dst])
    d = np.concatenate([g.dst, g.src])
    keep = s != d
    s, d = s[keep], d[keep]
    order = np.lexsort((d, s))
    s, d = s[order], d[order]
    ptr = np.searchsorted(s, np.arange(g.num_nodes + 1))
    return ptr, d


def bfs_greedy_partition(g: Graph, k: int, seed: int = 0) -> np.ndarray:
    """Balanced greedy graph growing.

    Parts are grown one at a time from the highest-degree unassigned node.
    The frontier node with most links into the growing part joins next
    (ties broken by a seeded permutation); when the frontier dries up the
    next seed is taken. Part sizes differ by at most one.
    """
    n = g.num_nodes
    if not 1 <= k <= max(n, 1):
        raise ConfigError(f"subgraph count must be in [1, {n}], got {k}")
    ptr, nbr = _undirected_neighbors(g)
    degree = np.diff(ptr)
    tiebreak = np.random.default_rng(seed).permutation(n)
    seed_order = np.lexsort((tiebreak, -degree))
    sizes = [n // k + (1 if p < n % k else 0) for p in range(k)]

    sub_of = np.full(n, -1, dtype=np.int64)
    cursor = 0
    for p in range(k):
        links = {}
        heap = []
        filled = 0
        while filled < sizes[p]:
            node = -1
            while heap:
                negc, _, cand = heapq.heappop(heap)
                if sub_of[cand] < 0 and -negc == links.get(cand, 0):
                    node = cand
                    break
            if node < 0:
                while sub_of[seed_order[cursor]] >= 0:
                    cursor += 1
                node = int(seed_order[cursor])
            sub_of[node] = p
            filled += 1
            for v in nbr[ptr[node]:ptr[node + 1]].tolist():
                if sub_of[v] < 0:
                    c = links.get(v, 0) + 1
                    links[v] = c
                    heapq.heappush(heap, (-c, int(tiebreak[v]), v))
    return sub_of


def read_assignment(path, num_nodes: int) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                out.append(int(line.split()[0]))
            except ValueError:
                raise ParseError(f"bad subgraph id {line!r}", path, lineno) from None
    if len(out) != num_nodes:
        raise ConfigError(f"{path}: {len(out)} assignments for {num_nodes} nodes")
    return np.asarray(out, dtype=np.int64)


def write_assignment(path, sub_of: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in sub_of.tolist():
            fh.write(f"{p}\n")


def partition_graph(g: Graph, k: int, method: str = "bfs_greedy", *,
                    assignment_path=None, seed: int = 0) -> PartitionPlan:
    if method == "bfs_greedy":
        sub_of = bfs_greedy_partition(g, k, seed)
    elif method == "import":
        if assignment_path is None:
            raise ConfigError("method 'import' needs assignment_path")
        sub_of = read_assignment(assignment_path, g.num_nodes)
        if sub_of.size and sub_of.max() >= k:
            raise ConfigError(f"imported ids reach {sub_of.max()}, but k={k}")
    else:
        raise ConfigError(f"unknown partition method {method!r}")
    return plan_from_assignment(g, sub_of, k)


# --------------------------------------------------------------------------
# Condense-Edge
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CondenseLayout:
    region_base: np.ndarray   # byte address of each subgraph's region
    order: tuple              # node IDs appended to each region, in order
    node_bytes: np.ndarray
    fifo_refills: np.ndarray  # per subgraph, loads of the 8-entry eID FIFO
    spills: np.ndarray        # per subgraph, Sparse Buffer write-backs

    def addresses(self, k: int) -> np.ndarray:
        nodes = np.asarray(self.order[k], dtype=np.int64)
        sizes = self.node_bytes[nodes]
        return self.region_base[k] + np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if nodes.size else nodes

    def rows(self):
        """(subgraph, position, node_id, byte_offset) tuples."""
        for k, nodes in enumerate(self.order):
            for pos, (node, addr) in enumerate(zip(nodes, self.addresses(k).tolist())):
                yield k, pos, int(node), int(addr)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subgraph", "position", "node_id", "byte_offset"])
            w.writerows(self.rows())


def _as_node_bytes(node_bytes, n: int) -> np.ndarray:
    nb = np.asarray(node_bytes, dtype=np.int64)
    if nb.ndim == 0:
        nb = np.full(n, int(nb), dtype=np.int64)
    if nb.shape != (n,) or np.any(nb <= 0):
        raise ConfigError("node_bytes must be positive, one entry per node")
    return nb


def _align_up(x: int, a: int) -> int:
    return -(-x // a) * a


def condense_schedule(plan: PartitionPlan, production_order: Sequence[int], node_bytes,
                      align: int = 128, region_capacity: Optional[int] = None) -> CondenseLayout:
    """Replay the Condense-Edge reorder over a production pass.

    Every produced node is compared against the head of each subgraph's eID
    FIFO in ascending subgraph order; on a match the head is popped and the
    node is appended to that subgraph's region. Regions start on ``align``
    byte boundaries. ``region_capacity`` (bytes of Sparse Buffer per region)
    only drives the spill count: spills are appended contiguously, so the
    DRAM placement is unchanged.
    """
    order = np.asarray(production_order, dtype=np.int64)
    if order.size > 1 and np.any(np.diff(order) <= 0):
        raise ScheduleError("production order must be strictly ascending")
    n = plan.sub_of.shape[0]
    nb = _as_node_bytes(node_bytes, n)
    k = plan.num_subgraphs

    backing = [deque(e.tolist()) for e in plan.eid_lists]
    fifos = [deque() for _ in range(k)]
    refills = np.zeros(k, dtype=np.int64)

    def head(p):
        if not fifos[p] and backing[p]:
            for _ in range(min(EID_FIFO_DEPTH, len(backing[p]))):
                fifos[p].append(backing[p].popleft())
            refills[p] += 1
        return fifos[p][0] if fifos[p] else None

    appended = [[] for _ in range(k)]
    for nid in order.tolist():
        for p in range(k):
            h = head(p)
            if h is None:
                continue
            if h < nid:
                raise ScheduleError(f"subgraph {p} needs node {h}, which was never produced")
            if h == nid:
                fifos[p].popleft()
                appended[p].append(nid)
    for p in range(k):
        h = head(p)
        if h is not None:
            raise ScheduleError(f"subgraph {p} needs node {h}, which was never produced")

    base = np.zeros(k, dtype=np.int64)
    addr = 0
    spills = np.zeros(k, dtype=np.int64)
    for p in range(k):
        base[p] = addr
        size = int(nb[appended[p]].sum()) if appended[p] else 0
        if region_capacity and size:
            spills[p] = -(-size // region_capacity)
        addr = _align_up(addr + size, align)
    return CondenseLayout(base, tuple(np.asarray(a, dtype=np.int64) for a in appended), nb, refills, spills)


def blocks_touched(addresses, sizes, granularity: int) -> int:
    """Distinct ``granularity``-aligned blocks covered by byte ranges."""
    addresses = np.asarray(addresses, dtype=np.int64)
    sizes = np.asarray(sizes, dtype=np.int64)
    if addresses.size == 0:
        return 0
    first = addresses // granularity
    last = (addresses + sizes - 1) // granularity
    span = last - first + 1
    blocks = np.repeat(first, span) + (np.arange(span.sum()) - np.repeat(np.cumsum(span) - span, span))
    return int(np.unique(blocks).size)


def original_addresses(node_bytes: np.ndarray) -> np.ndarray:
    """Node features laid out by ascending ID."""
    return np.concatenate([[0], np.cumsum(node_bytes)[:-1]]).astype(np.int64)


def sparse_access_count(plan: PartitionPlan, layout: Optional[CondenseLayout], granularity: int,
                        node_bytes) -> np.ndarray:
    """DRAM accesses per subgraph to fetch its sparse-connection features.

    With ``layout=None`` the features are read from their ascending-ID
    addresses; otherwise from the condensed region of that subgraph.
    """
    if granularity <= 0:
        raise ConfigError("granularity must be positive")
    n = plan.sub_of.shape[0]
    nb = _as_node_bytes(node_bytes, n)
    counts = np.zeros(plan.num_subgraphs, dtype=np.int64)
    if layout is None:
        addr = original_addresses(nb)
        for p, eids in enumerate(plan.eid_lists):
            counts[p] = blocks_touched(addr[eids], nb[eids], granularity)
    else:
        for p in range(plan.num_subgraphs):
            nodes = layout.order[p]
            counts[p] = blocks_touched(layout.addresses(p), nb[nodes], granularity)
    return counts
