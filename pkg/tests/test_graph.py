import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mega.errors import ConfigError, NodeRangeError, ParseError
from mega.graph import (
    PRESETS,
    build_graph,
    degree_profile,
    get_preset,
    load_graph,
    read_features,
    sample_neighbors,
    synth_graph,
    write_edge_list,
    write_features,
)


def dense_gcn_oracle(n, src, dst):
    A = np.zeros((n, n))
    for s, d in set(zip(src, dst)):
        A[d, s] = 1.0
    A = A + np.eye(n)
    deg = A.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    return dinv[:, None] * A * dinv[None, :]


def test_two_node_gcn_weights():
    g = build_graph(2, [0], [1], np.zeros((2, 1)), "gcn_sym")
    A = g.adjacency().toarray()
    # node 1 has degree 2 with its self loop, node 0 has degree 1
    assert A[1, 0] == pytest.approx(1 / math.sqrt(2))
    assert A[0, 0] == pytest.approx(1.0)
    assert A[1, 1] == pytest.approx(0.5)
    assert A[0, 1] == 0.0


def test_empty_edges_add():
    g = build_graph(3, [], [], np.zeros((3, 2)), "add")
    A = g.adjacency().toarray()
    assert np.count_nonzero(A - np.diag(np.diag(A))) == 0
    assert g.num_edges == 0


def test_duplicate_edges_collapse():
    g = build_graph(2, [0, 0], [1, 1], np.zeros((2, 1)), "add")
    assert g.num_edges == 1


def test_mean_normalization_rows_sum_to_one():
    g = build_graph(4, [0, 1, 2, 0], [3, 3, 3, 1], np.zeros((4, 1)), "mean")
    A = g.adjacency().toarray()
    assert A[3].sum() == pytest.approx(1.0)
    assert A[1].sum() == pytest.approx(1.0)


def test_chain_degrees():
    g = build_graph(3, [0, 1], [1, 2], np.zeros((3, 1)))
    p = degree_profile(g)
    assert p.in_degree.tolist() == [0, 1, 1]
    assert p.max_degree == 1


def test_star_degrees():
    g = build_graph(6, [1, 2, 3, 4, 5], [0] * 5, np.zeros((6, 1)))
    assert degree_profile(g).in_degree[0] == 5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11)), max_size=40))
def test_gcn_matches_dense_oracle(n, edges):
    edges = [(s, d) for s, d in edges if s < n and d < n and s != d]
    src = [s for s, _ in edges]
    dst = [d for _, d in edges]
    g = build_graph(n, src, dst, np.zeros((n, 1)), "gcn_sym")
    g.check()
    np.testing.assert_allclose(g.adjacency().toarray(), dense_gcn_oracle(n, src, dst), atol=1e-12)
    assert degree_profile(g).in_degree.sum() == g.num_edges


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=30))
def test_gcn_symmetric_on_undirected(n, edges):
    edges = [(s, d) for s, d in edges if s < n and d < n and s != d]
    src = [s for s, d in edges] + [d for s, d in edges]
    dst = [d for s, d in edges] + [s for s, d in edges]
    A = build_graph(n, src, dst, np.zeros((n, 1))).adjacency().toarray()
    np.testing.assert_allclose(A, A.T, atol=1e-9)


def test_cora_preset_edge_count():
    g = synth_graph(get_preset("cora"), seed=0)
    assert abs(g.num_edges - 10556) / 10556 <= 0.05
    assert g.num_nodes == 2708 and g.feature_dim == 1433
    g.check()
    assert degree_profile(g).in_degree.sum() == g.num_edges


def test_synth_reproducible():
    p = get_preset("cora", num_nodes=400, num_edges=1600, feature_len=32)
    a = synth_graph(p, seed=3, degree_feature_coupling=0.5)
    b = synth_graph(p, seed=3, degree_feature_coupling=0.5)
    assert np.array_equal(a.src, b.src) and np.array_equal(a.dst, b.dst)
    assert np.array_equal(a.features, b.features)
    c = synth_graph(p, seed=4, degree_feature_coupling=0.5)
    assert not np.array_equal(a.dst, c.dst)


def test_synth_hits_sparsity_target():
    p = get_preset("cora", num_nodes=500, num_edges=2000, feature_len=64, feature_sparsity=0.9)
    g = synth_graph(p, seed=0)
    assert np.mean(g.features == 0) == pytest.approx(0.9, abs=1e-3)


def test_uncoupled_features_are_degree_independent():
    p = get_preset("cora", num_nodes=2000, num_edges=8000, feature_len=64, feature_sparsity=0.5)
    g = synth_graph(p, seed=0, degree_feature_coupling=0.0)
    deg = degree_profile(g).in_degree
    mag = np.abs(g.features).mean(axis=1)
    assert abs(np.corrcoef(deg, mag)[0, 1]) < 0.1


def test_coupled_features_grow_with_degree():
    p = get_preset("cora", num_nodes=1000, num_edges=4000, feature_len=64, feature_sparsity=0.5)
    g = synth_graph(p, seed=0, degree_feature_coupling=1.0)
    deg = degree_profile(g).in_degree
    agg = np.abs(g.adjacency() @ g.features).mean(axis=1)
    order = np.argsort(deg, kind="stable")
    dec = len(order) // 10
    assert agg[order[-dec:]].mean() > agg[order[:dec]].mean()


def test_synth_rejects_infeasible_edge_count():
    p = get_preset("cora", num_nodes=4, num_edges=13, feature_len=2, avg_degree=13 / 4)
    with pytest.raises(ConfigError):
        synth_graph(p, seed=0)


def test_presets_consistent():
    for name, p in PRESETS.items():
        assert p.num_nodes > 0 and p.num_edges > 0 and p.feature_len > 0
        assert abs(p.avg_degree - p.num_edges / p.num_nodes) <= 0.05 * p.avg_degree, name


def test_io_roundtrip(tmp_path):
    p = get_preset("cora", num_nodes=50, num_edges=150, feature_len=8)
    g = synth_graph(p, seed=1)
    write_edge_list(tmp_path / "e.txt", g)
    write_features(tmp_path / "f.bin", g.features)
    h = load_graph(tmp_path / "e.txt", tmp_path / "f.bin")
    assert np.array_equal(h.indptr, g.indptr) and np.array_equal(h.indices, g.indices)
    np.testing.assert_allclose(h.features, g.features.astype(np.float32))
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"MEGF"


def test_parse_error_has_line_number(tmp_path):
    (tmp_path / "e.txt").write_text("# header\n0 1\n1 x\n")
    write_features(tmp_path / "f.bin", np.zeros((3, 1)))
    with pytest.raises(ParseError, match=r"e\.txt:3"):
        load_graph(tmp_path / "e.txt", tmp_path / "f.bin")


def test_node_out_of_range(tmp_path):
    (tmp_path / "e.txt").write_text("0 1\n1 3\n")
    write_features(tmp_path / "f.bin", np.zeros((3, 1)))
    with pytest.raises(NodeRangeError):
        load_graph(tmp_path / "e.txt", tmp_path / "f.bin")


def test_truncated_feature_file(tmp_path):
    write_features(tmp_path / "f.bin", np.zeros((3, 2)))
    data = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(data[:-2])
    with pytest.raises(ParseError):
        read_features(tmp_path / "f.bin")


def test_sample_neighbors_caps_in_degree():
    p = get_preset("cora", num_nodes=300, num_edges=3000, feature_len=4)
    g = synth_graph(p, seed=0)
    s = sample_neighbors(g, cap=5, seed=0)
    assert degree_profile(s).in_degree.max() <= 5
    assert np.array_equal(s.features, g.features)


def test_override_recomputes_average_degree():
    p = get_preset("cora", num_nodes=100, num_edges=500)
    assert p.avg_degree == pytest.approx(5.0)
