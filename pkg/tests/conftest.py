import numpy as np
import pytest

from mega.graph import build_graph
from mega.quant import QuantizedFeatures, qmax


def random_quantized(rng, n, f, sparsity, bits=None, bit_choices=(1, 2, 3, 4, 5, 6, 7, 8)):
    """Random valid QuantizedFeatures; ``bits`` fixes every node's bitwidth."""
    if bits is None:
        node_bits = rng.choice(bit_choices, size=n)
    else:
        node_bits = np.full(n, bits)
    top = qmax(node_bits)
    vals = np.zeros((n, f), dtype=np.int64)
    for i in range(n):
        if top[i] > 0:
            mag = rng.integers(1, top[i] + 1, size=f)
            vals[i] = mag * rng.choice([-1, 1], size=f)
    vals[rng.random((n, f)) < sparsity] = 0
    scales = rng.uniform(0.01, 2.0, size=n)
    return QuantizedFeatures(vals.astype(np.int8), scales, node_bits.astype(np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_part_graph():
    """Seven nodes split {0,1,5,6} / {2,3,4}.

    Intra edges keep both parts connected; the only cross edges are 0->2 and 5->3.
    """
    src = [0, 1, 5, 6, 2, 3, 0, 5]
    dst = [1, 5, 6, 0, 3, 4, 2, 3]
    feats = np.ones((7, 4))
    return build_graph(7, src, dst, feats, "gcn_sym")


TWO_PART_ASSIGNMENT = np.array([0, 0, 1, 1, 1, 0, 0])


def run_structured_quantized(seed, n=1000, f=128, sparsity=0.85, mean_run=8):
    """Alternating runs of 2-bit and 3-bit nodes with geometric run lengths."""
    rng = np.random.default_rng(seed)
    bits, b = [], 2
    while len(bits) < n:
        bits += [b] * int(rng.geometric(1 / mean_run))
        b = 5 - b
    bits = np.array(bits[:n])
    top = qmax(bits)
    mag = rng.integers(1, top[:, None] + 1, size=(n, f))
    vals = mag * rng.choice([-1, 1], size=(n, f))
    vals[rng.random((n, f)) < sparsity] = 0
    return QuantizedFeatures(vals.astype(np.int8), np.ones(n), bits.astype(np.int64))


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[num])
