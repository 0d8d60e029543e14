import json
import os

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gprompt.errors import ConfigError, InvalidGraphError, ParseError
from gprompt.graph import (
    GeneratorSpec, Graph, NodeGeneratorSpec, diffusion, few_shot, generate_node_graph,
    generate_synthetic_dataset, induced_subgraph, make_batch, node_tasks, parse_graph, read_dataset,
    serialize_graph, split_dataset, write_dataset,
)

from conftest import path_graph


def random_graph(seed, n, d=2, density=0.4):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < density, k=1)
    return Graph((upper | upper.T).astype(float), rng.standard_normal((n, d)))


# ---- construction ----

@pytest.mark.parametrize("A, msg", [
    (np.array([[0, 1], [0, 0]]), "symmetric"),
    (np.array([[1, 0], [0, 0]]), "diagonal"),
    (np.array([[0, 2], [2, 0]]), "binary"),
    (np.zeros((3, 3)), "does not match"),
])
def test_graph_rejects_bad_adjacency(A, msg):
    with pytest.raises(InvalidGraphError, match=msg):
        Graph(A, np.zeros((2, 1)))


def test_graph_rejects_nonfinite_features():
    with pytest.raises(InvalidGraphError):
        Graph(np.zeros((2, 2)), np.array([[0.0], [np.nan]]))


def test_graph_is_immutable():
    g = path_graph(3)
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0
    assert g.edges() == [(0, 1), (1, 2)]


@pytest.mark.parametrize("eps", [0.0, 0.3, 1.0])
def test_diffusion_matrix(eps):
    g = path_graph(4)
    S = diffusion(g.adjacency, eps)
    np.testing.assert_array_equal(S.values, g.adjacency + (1 + eps) * np.eye(4))
    np.testing.assert_array_equal(S.values, S.values.T)


def test_diffusion_rejects_negative_eps():
    with pytest.raises(InvalidGraphError):
        diffusion(np.zeros((2, 2)), -0.1)


# ---- induced subgraphs ----

def test_induced_subgraph_path_two_hops():
    g = path_graph(6)
    sub = induced_subgraph(g, 2, 2)
    assert sub.index_map == (2, 1, 3, 0, 4)
    assert sub.index_map[0] == 2
    np.testing.assert_array_equal(sub.subgraph.features, g.features[list(sub.index_map)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9), st.integers(1, 3))
def test_induced_subgraph_matches_bfs_distance(seed, n, hops):
    g = random_graph(seed, n)
    v = seed % n
    sub = induced_subgraph(g, v, hops)
    # brute-force distances via matrix powers
    reach = np.eye(n)
    within = np.eye(n, dtype=bool)
    for _ in range(hops):
        reach = reach @ (g.adjacency + np.eye(n))
        within |= reach > 0
    assert set(sub.index_map) == set(np.flatnonzero(within[v]).tolist())
    idx = list(sub.index_map)
    np.testing.assert_array_equal(sub.subgraph.adjacency, g.adjacency[np.ix_(idx, idx)])


def test_induced_subgraph_errors():
    g = path_graph(3)
    with pytest.raises(IndexError):
        induced_subgraph(g, 3)
    with pytest.raises(ValueError):
        induced_subgraph(g, 0, 0)


# ---- generators ----

def test_synthetic_dataset_is_deterministic_and_balanced():
    spec = GeneratorSpec(graphs_per_class=10)
    a = generate_synthetic_dataset(spec, 7)
    b = generate_synthetic_dataset(spec, 7)
    assert len(a) == 20
    assert [g.graph_label for g in a].count(0) == 10
    assert all(np.array_equal(x.features, y.features) and np.array_equal(x.adjacency, y.adjacency)
               for x, y in zip(a, b))
    assert all(spec.min_nodes <= g.num_nodes <= spec.max_nodes for g in a)
    c = generate_synthetic_dataset(spec, 8)
    assert not all(np.array_equal(x.features, y.features) for x, y in zip(a, c))


def test_synthetic_classes_differ_in_structure():
    # community graphs concentrate edges between equal block signs
    spec = GeneratorSpec(graphs_per_class=30, noise=0.0, feature_shift=0.0)
    graphs = generate_synthetic_dataset(spec, 0)
    def agreement(g):
        s = g.features[:, -1]
        u, v = np.nonzero(np.triu(g.adjacency, 1))
        return np.mean(s[u] == s[v]) if len(u) else 0.5
    comm = np.mean([agreement(g) for g in graphs if g.graph_label == 0])
    rand = np.mean([agreement(g) for g in graphs if g.graph_label == 1])
    assert comm > 0.75 and abs(rand - 0.5) < 0.1


@pytest.mark.parametrize("field, value", [("num_classes", 1), ("min_nodes", 0), ("p_in", 1.5), ("noise", -1.0)])
def test_generator_validation(field, value):
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(GeneratorSpec(**{field: value}), 0)


def test_node_graph_and_tasks():
    g = generate_node_graph(NodeGeneratorSpec(num_classes=3, nodes_per_class=5), 0)
    assert g.num_nodes == 15 and sorted(np.bincount(g.node_labels)) == [5, 5, 5]
    tasks = node_tasks(g, hops=1)
    assert len(tasks) == 15
    assert [t.graph_label for t in tasks] == g.node_labels.tolist()
    with pytest.raises(ConfigError):
        node_tasks(path_graph(3))


# ---- splits ----

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(0, 100))
def test_split_is_a_partition(n, seed):
    s = split_dataset(n, (0.8, 0.1, 0.1), seed)
    parts = s.train + s.val + s.test
    assert sorted(parts) == list(range(n))
    for part, r in zip((s.train, s.val, s.test), (0.8, 0.1, 0.1)):
        assert abs(len(part) - r * n) < 1.0 + 1e-9


def test_split_rejects_bad_ratios():
    with pytest.raises(ConfigError):
        split_dataset(10, (0.5, 0.5, 0.5))


def test_few_shot_stratified():
    labels = [0] * 20 + [1] * 20
    picked = few_shot(range(40), 10, seed=3, labels=labels)
    assert len(picked) == 10 and len(set(picked)) == 10
    assert sum(labels[i] for i in picked) == 5
    assert few_shot(range(40), 10, seed=3, labels=labels) == picked
    assert few_shot(range(5), 5) == [0, 1, 2, 3, 4]
    with pytest.raises(ConfigError):
        few_shot(range(5), 6)


def test_few_shot_fills_from_larger_class():
    labels = [0] * 2 + [1] * 20
    picked = few_shot(range(22), 10, labels=labels)
    assert len(picked) == 10 and sum(labels[i] == 0 for i in picked) == 2


# ---- text format ----

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 4))
def test_serialize_round_trip_is_exact(seed, n, d):
    g = random_graph(seed, n, d)
    h = parse_graph(serialize_graph(g))
    np.testing.assert_array_equal(g.features, h.features)
    np.testing.assert_array_equal(g.adjacency, h.adjacency)


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("2\n", 1),
    ("2 1\n0.5\n", 2),
    ("2 1\n0.5\nabc\n", 3),
    ("2 1\n0.5\n1.0\n0 0\n", 4),
    ("2 1\n0.5\n1.0\n0 5\n", 4),
    ("2 1\n0.5\n1.0\n0 1 2\n", 4),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as exc:
        parse_graph(text)
    assert exc.value.line == line


def test_dataset_directory_round_trip(tmp_path):
    graphs = generate_synthetic_dataset(GeneratorSpec(graphs_per_class=3, min_nodes=4, max_nodes=6), 0)
    split = split_dataset(graphs, seed=1)
    path = write_dataset(tmp_path, graphs, split, {"split_seed": 1})
    doc = json.load(open(path))
    assert len(doc["graphs"]) == 6
    assert all(os.path.exists(tmp_path / e["file"]) for e in doc["graphs"])
    back, split2, meta = read_dataset(tmp_path)
    assert [g.graph_label for g in back] == [g.graph_label for g in graphs]
    assert split2 == split and meta == {"split_seed": 1}


# ---- batching ----

def test_make_batch_layout():
    gs = [path_graph(2, seed=1).with_label(0), path_graph(3, seed=2).with_label(1)]
    b = make_batch(gs, n_max=4)
    assert sp.issparse(b.adjacency) and b.adjacency.shape == (8, 8)
    dense = b.adjacency.toarray()
    np.testing.assert_array_equal(dense[4:7, 4:7], gs[1].adjacency)
    assert dense[:4, 4:].sum() == 0
    np.testing.assert_array_equal(b.mask[:, 0], [1, 1, 0, 0, 1, 1, 1, 0])
    np.testing.assert_array_equal(b.pool.sum(axis=1), [2, 3])
    np.testing.assert_array_equal(b.labels, [0, 1])
    np.testing.assert_array_equal(b.node_rows(1), [4, 5, 6])
    with pytest.raises(ConfigError):
        make_batch(gs, n_max=2)
