"""Degree-aware mixed-precision quantization.

Every node picks its ``(scale, bitwidth)`` pair from tables indexed by its
in-degree. Weights share one 4-bit width with a scale per output column, so
the combination ``X @ W`` runs on integers and is rescaled by the outer
product of node and column scales afterwards.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParameterError, ShapeError
from .graph import DegreeProfile, Graph, degree_profile

MIN_BITS = 1
MAX_BITS = 8
WEIGHT_BITS = 4
KB_BITS = 8 * 1024  # bits per KB in the memory penalty


def qmax(bits):
    """Largest representable magnitude at ``bits`` (sign-magnitude)."""
    return (1 << (np.asarray(bits, dtype=np.int64) - 1)) - 1


def _check_bits(bits):
    b = np.asarray(bits)
    if np.any(b < MIN_BITS) or np.any(b > MAX_BITS):
        raise ParameterError(f"bitwidth must be in [{MIN_BITS}, {MAX_BITS}]")


def quantize_value(x: float, alpha: float, bits: int) -> int:
    """Quantize one real with scale ``alpha`` to a signed ``bits``-bit integer.

    Values below the saturation level ``alpha * (2**(bits-1) - 1)`` round
    half away from zero; larger magnitudes clamp to the saturation code.
    """
    if not alpha > 0:
        raise ParameterError(f"scale must be positive, got {alpha}")
    _check_bits(bits)
    top = (1 << (bits - 1)) - 1
    mag = abs(x)
    if mag < alpha * top:
        code = math.floor(mag / alpha + 0.5)
    else:
        code = top
    if x < 0:
        return -code
    return code


def quantize_array(x, alpha, bits) -> np.ndarray:
    """Vectorized :func:`quantize_value`; ``alpha``/``bits`` broadcast against ``x``."""
    x = np.asarray(x, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)):
        raise ParameterError("scale must be positive")
    _check_bits(bits)
    top = qmax(bits).astype(np.float64)
    mag = np.abs(x)
    code = np.where(mag < alpha * top, np.floor(mag / alpha + 0.5), top)
    return (np.sign(x) * code).astype(np.int64)


@dataclass(frozen=True)
class QuantParams:
    """Per-degree scale and bitwidth tables; entry ``k`` serves in-degree ``k + 1``."""

    scales: np.ndarray
    bitwidths: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=np.float64)
        b = np.asarray(self.bitwidths, dtype=np.int64)
        if s.ndim != 1 or s.shape != b.shape or s.size == 0:
            raise ParameterError("scales and bitwidths must be equal-length non-empty vectors")
        if np.any(~(s > 0)):
            raise ParameterError("all scales must be positive")
        _check_bits(b)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "bitwidths", b)

    @property
    def degree_index_cap(self) -> int:
        return int(self.scales.size)

    def index_of(self, degree) -> np.ndarray:
        # degree 0 shares the degree-1 entry; degrees past the cap share the last one
        return np.clip(np.asarray(degree, dtype=np.int64), 1, self.degree_index_cap) - 1

    def lookup(self, degree):
        idx = self.index_of(degree)
        return self.scales[idx], self.bitwidths[idx]

    @classmethod
    def uniform(cls, scale: float, bits: int, degree_index_cap: int = 1) -> "QuantParams":
        return cls(np.full(degree_index_cap, float(scale)), np.full(degree_index_cap, int(bits)))

    def to_json(self) -> str:
        return json.dumps({"scales": self.scales.tolist(), "bitwidths": self.bitwidths.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "QuantParams":
        obj = json.loads(text)
        return cls(np.asarray(obj["scales"], dtype=np.float64), np.asarray(obj["bitwidths"], dtype=np.int64))


@dataclass(frozen=True, eq=False)
class QuantizedFeatures:
    """Integer node features with the per-node scale and bitwidth that produced them."""

    values: np.ndarray
    node_scale: np.ndarray
    node_bitwidth: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.values.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.values.shape[1])

    def node_nnz(self) -> np.ndarray:
        return np.count_nonzero(self.values, axis=1)

    def check(self) -> None:
        assert self.values.ndim == 2
        assert self.node_scale.shape == self.node_bitwidth.shape == (self.values.shape[0],)
        assert np.all(self.node_scale > 0)
        assert np.all((self.node_bitwidth >= MIN_BITS) & (self.node_bitwidth <= MAX_BITS))
        assert np.all(np.abs(self.values) <= qmax(self.node_bitwidth)[:, None])

    def equals(self, other: "QuantizedFeatures") -> bool:
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.node_bitwidth, other.node_bitwidth)
            and np.array_equal(self.node_scale, other.node_scale)
        )


@dataclass(frozen=True, eq=False)
class QuantizedWeights:
    values: np.ndarray
    col_scale: np.ndarray

    def dequantize(self) -> np.ndarray:
        return self.values * self.col_scale[None, :]


def quantize_features(X, profile: DegreeProfile, params: QuantParams) -> QuantizedFeatures:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != profile.in_degree.shape[0]:
        raise ShapeError("feature rows must match the degree profile length")
    alpha, bits = params.lookup(profile.in_degree)
    values = quantize_array(X, alpha[:, None], bits[:, None]).astype(np.int8)
    return QuantizedFeatures(values=values, node_scale=alpha.copy(), node_bitwidth=bits.astype(np.int64))


def dequantize(q: QuantizedFeatures) -> np.ndarray:
    return q.values.astype(np.float64) * q.node_scale[:, None]


def quantize_weights(W, bits: int = WEIGHT_BITS) -> QuantizedWeights:
    """Per-column symmetric quantization; an all-zero column gets scale 1."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ShapeError("weights must be a non-empty matrix")
    top = (1 << (bits - 1)) - 1
    colmax = np.abs(W).max(axis=0)
    beta = np.where(colmax > 0, colmax / top, 1.0)
    values = quantize_array(W, beta[None, :], bits).astype(np.int8)
    return QuantizedWeights(values=values, col_scale=beta)


# Combined outputs B = XW are requantized the same way as the weights.
quantize_columns = quantize_weights


def integer_matmul(Xq: QuantizedFeatures, Wq: QuantizedWeights) -> np.ndarray:
    """``(Xbar @ Wbar) * outer(alpha, beta)``."""
    if Xq.values.shape[1] != Wq.values.shape[0]:
        raise ShapeError(f"inner dimensions differ: {Xq.values.shape} @ {Wq.values.shape}")
    acc = Xq.values.astype(np.int64) @ Wq.values.astype(np.int64)
    return acc * np.outer(Xq.node_scale, Wq.col_scale)


def memory_penalty(node_bitwidths: Sequence, dims: Sequence[int], m_target: float) -> float:
    """Squared deviation (in KB) of the feature footprint from ``m_target``."""
    if len(node_bitwidths) != len(dims):
        raise ConfigError("one bitwidth array per layer is required")
    total = 0
    for bits, dim in zip(node_bitwidths, dims):
        total += int(dim) * int(np.asarray(bits, dtype=np.int64).sum())
    return (total / KB_BITS - m_target) ** 2


def average_bitwidth(layers) -> float:
    """Feature-bit-weighted mean bitwidth over one or several QuantizedFeatures."""
    if isinstance(layers, QuantizedFeatures):
        layers = [layers]
    bits = sum(q.feature_dim * float(q.node_bitwidth.sum()) for q in layers)
    elems = sum(q.feature_dim * q.num_nodes for q in layers)
    if elems == 0:
        raise ConfigError("no nodes to average over")
    return bits / elems


def compression_ratio(q) -> float:
    """``32 / average bitwidth``, unrounded."""
    return 32.0 / average_bitwidth(q)


# --------------------------------------------------------------------------
# Training-free parameter search
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizeResult:
    params: QuantParams
    proxy_mse: float
    memory_kb: float
    objective: float
    feasible: bool
    bucket_degrees: tuple  # first degree of each bucket


def degree_buckets(counts: np.ndarray, min_size: int = 8) -> np.ndarray:
    """Map degree index (0-based, degree ``k+1``) to a bucket id.

    A degree with fewer than ``min_size`` nodes joins the nearest lower
    bucket; the first degree always opens a bucket.
    """
    bucket = np.zeros(counts.size, dtype=np.int64)
    current = -1
    for k, c in enumerate(counts):
        if current < 0 or c >= min_size:
            current += 1
        bucket[k] = current
    return bucket


def _golden(fn, lo: float, hi: float, iters: int = 40) -> float:
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = fn(d)
    return c if fc <= fd else d


class _BucketFit:
    """Weighted reconstruction error of one degree bucket as a function of scale."""

    def __init__(self, values: np.ndarray, weights: np.ndarray):
        self.values = values
        self.weights = weights
        self.peak = float(np.abs(values).max()) if values.size else 0.0

    def error(self, alpha: float, bits: int) -> float:
        if self.values.size == 0:
            return 0.0
        rec = alpha * quantize_array(self.values, alpha, bits)
        return float(np.dot(self.weights, (self.values - rec) ** 2))

    def fit(self, bits: int, previous: float | None) -> float:
        if self.peak == 0.0:
            return 1.0
        top = (1 << (bits - 1)) - 1
        if top == 0:
            return self.peak  # every value maps to zero; the scale is irrelevant
        err = lambda t: self.error(math.exp(t) / top, bits)  # noqa: E731
        lo, hi = math.log(self.peak * 1e-3), math.log(self.peak)
        grid = np.linspace(lo, hi, 17)
        errs = [err(t) for t in grid]
        k = int(np.argmin(errs))
        t = _golden(err, grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)])
        best = math.exp(t) / top
        candidates = [best, self.peak / top]
        if previous is not None:
            candidates.append(previous)
        return min(candidates, key=lambda a: self.error(a, bits))


class _ProxyModel:
    """Incremental evaluation of MSE(A (Xq W), A (X W)) over bucket moves."""

    def __init__(self, g: Graph, W: np.ndarray, node_bucket: np.ndarray, fits, nbuckets: int):
        self.A = g.adjacency().tocsc()
        self.X = np.asarray(g.features, dtype=np.float64)
        self.W = W
        self.n, self.f2 = g.num_nodes, W.shape[1]
        self.rows = [np.flatnonzero(node_bucket == k) for k in range(nbuckets)]
        self.fits = fits
        self.scale_cache: dict = {}
        self.comb_cache: dict = {}
        Xs = sp.csr_matrix(self.X)
        self.sparse_rows = [Xs[r] for r in self.rows]
        self.target = self.A @ (self.X @ W)

    def scale(self, k: int, bits: int) -> float:
        key = (k, bits)
        if key not in self.scale_cache:
            prev = self.scale(k, bits - 1) if bits > MIN_BITS else None
            self.scale_cache[key] = self.fits[k].fit(bits, prev)
        return self.scale_cache[key]

    def combined_rows(self, k: int, bits: int) -> np.ndarray:
        """(Xq W) restricted to bucket ``k`` quantized at ``bits``."""
        key = (k, bits)
        if key not in self.comb_cache:
            a = self.scale(k, bits)
            block = self.sparse_rows[k].copy()
            block.data = a * quantize_array(block.data, a, bits)
            self.comb_cache[key] = np.asarray(block @ self.W)
        return self.comb_cache[key]

    def output(self, bits_per_bucket) -> np.ndarray:
        C = np.zeros((self.n, self.f2))
        for k, b in enumerate(bits_per_bucket):
            C[self.rows[k]] = self.combined_rows(k, int(b))
        return self.A @ C

    def delta(self, k: int, b_from: int, b_to: int):
        rows = self.rows[k]
        dC = self.combined_rows(k, b_to) - self.combined_rows(k, b_from)
        sub = self.A[:, rows]
        touched = np.unique(sub.indices)
        if touched.size == 0:
            return touched, np.zeros((0, self.f2))
        dY = sub @ dC
        return touched, np.asarray(dY)[touched]


def _delta_mse(resid: np.ndarray, move, denom: float) -> float:
    touched, d = move
    if touched.size == 0:
        return 0.0
    return float(2.0 * np.sum(resid[touched] * d) + np.sum(d * d)) / denom


def proxy_mse(g: Graph, Wq: QuantizedWeights, params: QuantParams) -> float:
    """Aggregated-output reconstruction error of quantizing ``g.features`` with ``params``."""
    W = Wq.dequantize()
    A = g.adjacency()
    X = np.asarray(g.features, dtype=np.float64)
    q = quantize_features(X, degree_profile(g), params)
    diff = A @ (dequantize(q) @ W) - A @ (X @ W)
    return float(np.mean(diff ** 2))


def optimize_params(
    g: Graph,
    Wq: QuantizedWeights,
    m_target: float,
    lam: float,
    seed: int = 0,
    *,
    min_bucket: int = 8,
    max_fit_values: int = 200_000,
    fill_points: int = 24,
) -> OptimizeResult:
    """Choose per-degree scales and bitwidths for ``g.features``.

    The objective is ``MSE(A (Xq Wq), A (X Wq)) + lam * memory_penalty``.
    Scales are fit per bucket and bitwidth by golden-section search on a
    fan-out weighted reconstruction error. Candidate bit assignments come
    from a greedy path (one bit everywhere, then every bucket to two, then
    the best MSE drop per stored bit while positive), the uniform
    assignments, and budget-constrained fills at ``fill_points`` memory
    levels. None of them depend on ``m_target`` or ``lam``; the objective is
    minimized over their memory/MSE Pareto frontier, which makes the
    returned MSE non-increasing in ``m_target``.
    ``lam == 0`` removes the memory pressure and returns 8 bits everywhere.
    """
    if not m_target > 0:
        raise ConfigError("m_target must be positive")
    if lam < 0:
        raise ConfigError("lam must be non-negative")
    rng = np.random.default_rng(seed)
    W = Wq.dequantize()
    X = np.asarray(g.features, dtype=np.float64)
    n, f = X.shape
    if W.shape[0] != f:
        raise ShapeError("weight rows must equal the feature dimension")

    prof = degree_profile(g)
    cap = max(prof.max_degree, 1)
    deg_idx = np.clip(prof.in_degree, 1, cap) - 1
    counts = np.bincount(deg_idx, minlength=cap)
    bucket_of_degree = degree_buckets(counts, min_bucket)
    nb = int(bucket_of_degree.max()) + 1
    node_bucket = bucket_of_degree[deg_idx]

    A = g.adjacency()
    fanout = np.asarray(A.multiply(A).sum(axis=0)).ravel()
    fanout = fanout + 1e-3 * (fanout.mean() if fanout.size else 0.0) + 1e-12
    fits = []
    for k in range(nb):
        rows = np.flatnonzero(node_bucket == k)
        block = X[rows]
        r, c = np.nonzero(block)
        vals = block[r, c]
        wts = fanout[rows][r]
        if vals.size > max_fit_values:
            pick = np.sort(rng.choice(vals.size, size=max_fit_values, replace=False))
            vals, wts = vals[pick], wts[pick]
        fits.append(_BucketFit(vals, wts))

    model = _ProxyModel(g, W, node_bucket, fits, nb)
    sizes = np.array([r.size for r in model.rows], dtype=np.int64)
    denom = float(n * W.shape[1])

    def memory_kb(bits):
        return float(f * np.dot(sizes, bits)) / KB_BITS

    def objective(mse, bits):
        return mse + lam * (memory_kb(bits) - m_target) ** 2

    def expand(bits) -> QuantParams:
        scales = np.array([model.scale(k, int(b)) for k, b in enumerate(bits)])
        return QuantParams(scales[bucket_of_degree], np.asarray(bits)[bucket_of_degree])

    first_degrees = tuple(int(np.flatnonzero(bucket_of_degree == k)[0]) + 1 for k in range(nb))
    floor_kb = memory_kb(np.ones(nb, dtype=np.int64))

    if lam == 0:
        bits = np.full(nb, MAX_BITS, dtype=np.int64)
        mse = float(np.mean((model.output(bits) - model.target) ** 2))
        return OptimizeResult(expand(bits), mse, memory_kb(bits), 0.0, True, first_degrees)

    moves = {}

    def move(k, b_from, b_to):
        key = (k, b_from, b_to)
        if key not in moves:
            moves[key] = model.delta(k, b_from, b_to)
        return moves[key]

    step_kb = sizes * f / KB_BITS
    candidates = {}

    def record(b, m):
        candidates.setdefault(tuple(int(v) for v in b), m)

    def fresh(b):
        r = model.output(b) - model.target
        return r, float(np.mean(r ** 2))

    # greedy path: lift everything to two bits, then buy the best MSE drop per bit
    bits = np.full(nb, MIN_BITS, dtype=np.int64)
    resid, mse = fresh(bits)
    record(bits, mse)
    path = [bits.copy()]
    for phase in (1, 2):
        while True:
            best, best_gain = None, 0.0
            for k in range(nb):
                b = int(bits[k])
                if b >= MAX_BITS or (phase == 1 and b != MIN_BITS):
                    continue
                dm = _delta_mse(resid, move(k, b, b + 1), denom)
                if dm > 0:
                    continue
                gain = -dm / step_kb[k]
                if best is None or gain > best_gain:
                    best, best_gain = k, gain
            if best is None:
                break
            touched, d = move(best, int(bits[best]), int(bits[best]) + 1)
            resid[touched] += d
            bits[best] += 1
            mse = float(np.mean(resid ** 2))
            record(bits, mse)
            path.append(bits.copy())

    for b in range(MIN_BITS, MAX_BITS + 1):
        u = np.full(nb, b, dtype=np.int64)
        if tuple(u.tolist()) not in candidates:
            record(u, fresh(u)[1])

    # budget-constrained fills between the path points
    path_kb = np.array([memory_kb(p) for p in path])
    top_kb = memory_kb(np.full(nb, MAX_BITS))
    for budget in np.linspace(floor_kb, top_kb, fill_points + 1)[1:]:
        start = int(np.searchsorted(path_kb, budget + 1e-9, side="right")) - 1
        bits = path[max(start, 0)].copy()
        resid, mse = fresh(bits)
        for _ in range(4 * nb * MAX_BITS):
            free = budget - memory_kb(bits) + 1e-9
            best, best_gain = None, 0.0
            for k in range(nb):
                b = int(bits[k])
                if b < MAX_BITS and step_kb[k] <= free:
                    dm = _delta_mse(resid, move(k, b, b + 1), denom)
                    if dm < 0 and -dm / step_kb[k] > best_gain:
                        best, best_gain = k, -dm / step_kb[k]
            if best is not None:
                b = int(bits[best])
                touched, d = move(best, b, b + 1)
                resid[touched] += d
                bits[best] += 1
                mse = float(np.mean(resid ** 2))
                record(bits, mse)
                continue
            swap = _best_swap(bits, resid, move, step_kb, free, denom, W.shape[1])
            if swap is None:
                break
            down, up, touched, d, dm = swap
            resid[touched] += d
            bits[down] -= 1
            bits[up] += 1
            mse = float(np.mean(resid ** 2))
            record(bits, mse)

    # keep the memory/MSE frontier; the choice along it is monotone in m_target
    ordered = sorted(candidates.items(), key=lambda kv: (memory_kb(kv[0]), kv[1]))
    frontier = []
    for b, m in ordered:
        if not frontier or m < frontier[-1][1]:
            frontier.append((np.asarray(b, dtype=np.int64), m))
    scores = np.array([objective(m, b) for b, m in frontier])
    pick = len(scores) - 1 - int(np.argmin(scores[::-1]))  # ties go to more memory
    bits, mse = frontier[pick]
    feasible = m_target >= floor_kb
    return OptimizeResult(expand(bits), mse, memory_kb(bits), float(scores[pick]), feasible, first_degrees)


def _best_swap(bits, resid, move, step_kb, free, denom, f2, shortlist: int = 8):
    """Lower one bucket by a bit and raise another, within the free budget."""
    nb = bits.size
    downs = {}
    ups = {}
    for k in range(nb):
        b = int(bits[k])
        if b > MIN_BITS:
            downs[k] = _delta_mse(resid, move(k, b, b - 1), denom)
        if b < MAX_BITS:
            ups[k] = _delta_mse(resid, move(k, b, b + 1), denom)
    pairs = [
        (downs[a] + ups[c], a, c)
        for a in downs for c in ups
        if a != c and step_kb[c] - step_kb[a] <= free and downs[a] + ups[c] < 0
    ]
    pairs.sort()
    best = None
    for _, a, c in pairs[:shortlist]:
        ta, da = move(a, int(bits[a]), int(bits[a]) - 1)
        tc, dc = move(c, int(bits[c]), int(bits[c]) + 1)
        touched = np.union1d(ta, tc)
        d = np.zeros((touched.size, f2))
        d[np.searchsorted(touched, ta)] += da
        d[np.searchsorted(touched, tc)] += dc
        dm = _delta_mse(resid, (touched, d), denom)
        if dm < 0 and (best is None or dm < best[4]):
            best = (a, c, touched, d, dm)
    return best
