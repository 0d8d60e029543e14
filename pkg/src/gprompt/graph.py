"""Graphs, diffusion matrices, subgraphs, synthetic data, splits and file formats."""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InvalidGraphError, ParseError


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with dense adjacency and node features."""

    adjacency: np.ndarray
    features: np.ndarray
    graph_label: Optional[int] = None
    node_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        A = _readonly(self.adjacency)
        X = _readonly(self.features)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise InvalidGraphError(f"features must be N x D with N, D >= 1, got shape {X.shape}")
        n = X.shape[0]
        if A.shape != (n, n):
            raise InvalidGraphError(f"adjacency shape {A.shape} does not match {n} nodes")
        _check_adjacency(A)
        if not np.all(np.isfinite(X)):
            raise InvalidGraphError("features must be finite")
        object.__setattr__(self, "adjacency", A)
        object.__setattr__(self, "features", X)
        if self.graph_label is not None:
            object.__setattr__(self, "graph_label", int(self.graph_label))
        if self.node_labels is not None:
            y = np.array(self.node_labels, dtype=np.int64)
            if y.shape != (n,):
                raise InvalidGraphError(f"node_labels must have length {n}")
            y.setflags(write=False)
            object.__setattr__(self, "node_labels", y)

    @property
    def num_nodes(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def edges(self):
        """Sorted list of (u, v) pairs with u < v."""
        u, v = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(u.tolist(), v.tolist()))

    def with_label(self, label):
        return Graph(self.adjacency, self.features, graph_label=label, node_labels=self.node_labels)


def _check_adjacency(A):
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidGraphError(f"adjacency must be square, got shape {A.shape}")
    if not np.all((A == 0) | (A == 1)):
        raise InvalidGraphError("adjacency must be binary")
    if not np.array_equal(A, A.T):
        raise InvalidGraphError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise InvalidGraphError("adjacency must have a zero diagonal (self-loops are not allowed)")


@dataclass(frozen=True, eq=False)
class DiffusionMatrix:
    values: np.ndarray
    epsilon: float


def diffusion(adjacency, epsilon):
    """Diffusion matrix ``A + (1 + epsilon) I``."""
    A = np.asarray(adjacency, dtype=np.float64)
    _check_adjacency(A)
    if epsilon < 0:
        raise InvalidGraphError(f"epsilon must be >= 0, got {epsilon}")
    return DiffusionMatrix(_readonly(A + (1.0 + epsilon) * np.eye(A.shape[0])), float(epsilon))


# ---- induced subgraphs ----

@dataclass(frozen=True, eq=False)
class InducedSubgraph:
    center: int
    hops: int
    subgraph: Graph
    index_map: tuple  # subgraph node -> original node; entry 0 is the center


def induced_subgraph(g: Graph, v: int, n: int = 2) -> InducedSubgraph:
    """n-hop ball around ``v`` in BFS order (the center comes first)."""
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range for graph with {g.num_nodes} nodes")
    if n < 1:
        raise ValueError(f"hops must be >= 1, got {n}")
    A = g.adjacency
    dist = {v: 0}
    order = [v]
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if dist[u] == n:
            continue
        for w in np.flatnonzero(A[u]):
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                order.append(w)
                queue.append(w)
    idx = np.array(order)
    sub_labels = None if g.node_labels is None else g.node_labels[idx]
    label = None if g.node_labels is None else int(g.node_labels[v])
    sub = Graph(A[np.ix_(idx, idx)], g.features[idx], graph_label=label, node_labels=sub_labels)
    return InducedSubgraph(center=v, hops=n, subgraph=sub, index_map=tuple(order))


# ---- synthetic data ----

@dataclass(frozen=True)
class GeneratorSpec:
    """Two-class style generator: community graphs vs. density-matched random graphs.

    Even classes are two-block community graphs, odd classes are uniform random
    graphs with the same expected density. Class ``c`` shifts feature dimension
    ``c % D`` by ``feature_shift``. The last feature dimension carries a +/-
    ``block_signal`` that follows the block in community graphs and is random in
    uniform graphs, so its marginal is class-independent.
    """

    num_classes: int = 2
    graphs_per_class: int = 100
    min_nodes: int = 16
    max_nodes: int = 24
    feature_dim: int = 8
    p_in: float = 0.5
    p_out: float = 0.05
    feature_shift: float = 0.3
    block_signal: float = 1.0
    noise: float = 1.0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.graphs_per_class < 1:
            raise ConfigError("graphs_per_class must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ConfigError("need 1 <= min_nodes <= max_nodes")
        for name in ("p_in", "p_out"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def _sym_from_upper(rng, probs):
    n = probs.shape[0]
    draws = rng.random((n, n)) < probs
    upper = np.triu(draws, k=1)
    return (upper | upper.T).astype(np.float64)


def _community_graph(rng, n, p_in, p_out):
    blocks = np.arange(n) % 2
    rng.shuffle(blocks)
    same = blocks[:, None] == blocks[None, :]
    return _sym_from_upper(rng, np.where(same, p_in, p_out)), blocks


def _matched_density(n, p_in, p_out):
    a = (n + 1) // 2
    b = n // 2
    pairs = n * (n - 1) / 2
    if pairs == 0:
        return 0.0
    within = a * (a - 1) / 2 + b * (b - 1) / 2
    return (within * p_in + a * b * p_out) / pairs


def generate_synthetic_dataset(spec: GeneratorSpec, seed: int) -> list:
    """Deterministic list of labelled graphs, class-balanced, ordered by class then index."""
    spec.validate()
    rng = np.random.default_rng(seed)
    D = spec.feature_dim
    graphs = []
    for c in range(spec.num_classes):
        mean = np.zeros(D)
        mean[c % D] = spec.feature_shift
        for _ in range(spec.graphs_per_class):
            n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
            if c % 2 == 0:
                A, blocks = _community_graph(rng, n, spec.p_in, spec.p_out)
                sign = 2.0 * blocks - 1.0
            else:
                p = _matched_density(n, spec.p_in, spec.p_out)
                A = _sym_from_upper(rng, np.full((n, n), p))
                sign = rng.choice([-1.0, 1.0], size=n)
            X = mean + spec.noise * rng.standard_normal((n, D))
            X[:, D - 1] += spec.block_signal * sign
            graphs.append(Graph(A, X, graph_label=c))
    return graphs


@dataclass(frozen=True)
class NodeGeneratorSpec:
    num_classes: int = 3
    nodes_per_class: int = 30
    feature_dim: int = 8
    p_in: float = 0.15
    p_out: float = 0.01
    feature_shift: float = 1.0
    noise: float = 1.0

    def validate(self):
        if self.num_classes < 2 or self.nodes_per_class < 1 or self.feature_dim < 1:
            raise ConfigError("node generator needs >= 2 classes, >= 1 node per class and D >= 1")


def generate_node_graph(spec: NodeGeneratorSpec, seed: int) -> Graph:
    """One stochastic-block-model graph whose blocks are the node classes."""
    spec.validate()
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(spec.num_classes), spec.nodes_per_class)
    rng.shuffle(y)
    same = y[:, None] == y[None, :]
    A = _sym_from_upper(rng, np.where(same, spec.p_in, spec.p_out))
    means = np.zeros((spec.num_classes, spec.feature_dim))
    for c in range(spec.num_classes):
        means[c, c % spec.feature_dim] = spec.feature_shift
    X = means[y] + spec.noise * rng.standard_normal((len(y), spec.feature_dim))
    return Graph(A, X, node_labels=y)


def node_tasks(g: Graph, hops=2, nodes=None):
    """Cast node classification as graph classification over induced subgraphs."""
    if g.node_labels is None:
        raise ConfigError("node tasks need node labels")
    nodes = range(g.num_nodes) if nodes is None else nodes
    return [induced_subgraph(g, int(v), hops).subgraph for v in nodes]


# ---- splits ----

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple
    seed: int

    def assignment(self, n):
        out = [""] * n
        for name in ("train", "val", "test"):
            for i in getattr(self, name):
                out[i] = name
        return out


def _largest_remainder(n, ratios):
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(graphs, ratios=(0.8, 0.1, 0.1), seed=0) -> DatasetSplit:
    """Shuffled train/val/test partition; sizes within one item of the ratios."""
    n = graphs if isinstance(graphs, int) else len(graphs)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b, _ = _largest_remainder(n, ratios)
    return DatasetSplit(
        train=tuple(sorted(perm[:a].tolist())),
        val=tuple(sorted(perm[a:a + b].tolist())),
        test=tuple(sorted(perm[a + b:].tolist())),
        seed=seed,
    )


def few_shot(train, shots, seed=0, labels=None):
    """Subsample ``shots`` items from ``train``, class-stratified when labels are given.

    ``labels`` maps item index -> class (a sequence indexed by item or a dict).
    """
    train = list(train)
    if shots > len(train):
        raise ConfigError(f"shots={shots} exceeds train size {len(train)}")
    if shots < 0:
        raise ConfigError("shots must be >= 0")
    if shots == len(train):
        return sorted(train)
    rng = np.random.default_rng(seed)
    if labels is None:
        return sorted(rng.choice(train, size=shots, replace=False).tolist())
    by_class = {}
    for i in train:
        by_class.setdefault(int(labels[i]), []).append(i)
    classes = sorted(by_class)
    for c in classes:
        rng.shuffle(by_class[c])
    quota = {c: shots // len(classes) for c in classes}
    for c in classes[: shots % len(classes)]:
        quota[c] += 1
    picked = {c: by_class[c][: quota[c]] for c in classes}
    short = shots - sum(len(v) for v in picked.values())
    while short > 0:
        for c in classes:
            if short and len(picked[c]) < len(by_class[c]):
                picked[c] = by_class[c][: len(picked[c]) + 1]
                short -= 1
    return sorted(i for v in picked.values() for i in v)


# ---- text format ----

def serialize_graph(g: Graph) -> str:
    lines = [f"{g.num_nodes} {g.feature_dim}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in g.features]
    lines += [f"{u} {v}" for u, v in g.edges()]
    return "\n".join(lines) + "\n"


def parse_graph(text: str, graph_label=None) -> Graph:
    """Parse ``N D`` header, N feature rows, then ``u v`` edge lines."""
    rows = [(i + 1, line.split()) for i, line in enumerate(text.splitlines())]
    rows = [(ln, toks) for ln, toks in rows if toks]
    if not rows:
        raise ParseError("empty file", line=1)
    ln, head = rows[0]
    if len(head) != 2:
        raise ParseError("header must be 'N D'", line=ln)
    try:
        n, d = int(head[0]), int(head[1])
    except ValueError:
        raise ParseError(f"non-numeric header token in {head}", line=ln) from None
    if n < 1 or d < 1:
        raise ParseError("header values must be positive", line=ln)
    if len(rows) < 1 + n:
        raise ParseError(f"expected {n} feature rows, found {len(rows) - 1}", line=rows[-1][0])
    X = np.empty((n, d))
    for i in range(n):
        ln, toks = rows[1 + i]
        if len(toks) != d:
            raise ParseError(f"feature row has {len(toks)} values, expected {d}", line=ln)
        try:
            X[i] = [float(t) for t in toks]
        except ValueError:
            raise ParseError(f"non-numeric feature token in row {i}", line=ln) from None
        if not np.all(np.isfinite(X[i])):
            raise ParseError("non-finite feature value", line=ln)
    A = np.zeros((n, n))
    for ln, toks in rows[1 + n:]:
        if len(toks) != 2:
            raise ParseError("edge line must be 'u v'", line=ln)
        try:
            u, v = int(toks[0]), int(toks[1])
        except ValueError:
            raise ParseError(f"non-numeric edge token in {toks}", line=ln) from None
        if u == v:
            raise ParseError(f"self-loop on node {u}", line=ln)
        if not (0 <= u < n and 0 <= v < n):
            raise ParseError(f"dangling node index in edge ({u}, {v})", line=ln)
        A[u, v] = A[v, u] = 1.0
    return Graph(A, X, graph_label=graph_label)


# ---- dataset directories ----

MANIFEST = "manifest.json"


def write_dataset(directory, graphs, split: Optional[DatasetSplit] = None, meta=None):
    """Write one text file per graph plus a JSON manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    assign = split.assignment(len(graphs)) if split is not None else [""] * len(graphs)
    entries = []
    for i, g in enumerate(graphs):
        name = f"graph_{i:05d}.txt"
        with open(os.path.join(directory, name), "w") as fh:
            fh.write(serialize_graph(g))
        entries.append({"file": name, "label": g.graph_label, "split": assign[i]})
    doc = {"format": "gprompt-dataset", "version": 1, "meta": meta or {}, "graphs": entries}
    path = os.path.join(directory, MANIFEST)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_dataset(directory):
    """Inverse of :func:`write_dataset`; returns (graphs, split or None, meta)."""
    path = os.path.join(directory, MANIFEST)
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "gprompt-dataset":
        raise ParseError(f"{path} is not a dataset manifest")
    graphs, parts = [], {"train": [], "val": [], "test": []}
    for i, e in enumerate(doc["graphs"]):
        with open(os.path.join(directory, e["file"])) as fh:
            graphs.append(parse_graph(fh.read(), graph_label=e.get("label")))
        if e.get("split") in parts:
            parts[e["split"]].append(i)
    split = None
    if any(parts.values()):
        split = DatasetSplit(tuple(parts["train"]), tuple(parts["val"]), tuple(parts["test"]),
                             seed=int(doc.get("meta", {}).get("split_seed", 0)))
    return graphs, split, doc.get("meta", {})


# ---- batching ----

@dataclass(eq=False)
class GraphBatch:
    """Graphs padded to ``n_max`` rows each and stacked block-diagonally.

    Row ``b * n_max + i`` holds node ``i`` of graph ``b``. Padding rows have zero
    features, no edges and mask 0. ``adjacency`` is a scipy CSR matrix.
    """

    features: np.ndarray
    adjacency: np.ndarray
    mask: np.ndarray
    pool: np.ndarray
    counts: np.ndarray
    n_max: int
    labels: Optional[np.ndarray] = None
    graphs: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.counts)

    def node_rows(self, b):
        return np.arange(b * self.n_max, b * self.n_max + self.counts[b])


def make_batch(graphs: Sequence[Graph], n_max=None) -> GraphBatch:
    counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    n_max = int(counts.max()) if n_max is None else int(n_max)
    if counts.max() > n_max:
        raise ConfigError(f"graph with {counts.max()} nodes exceeds n_max={n_max}")
    D = graphs[0].feature_dim
    B = len(graphs)
    X = np.zeros((B * n_max, D))
    mask = np.zeros((B * n_max, 1))
    pool = np.zeros((B, B * n_max))
    blocks = []
    for b, g in enumerate(graphs):
        if g.feature_dim != D:
            raise ConfigError("all graphs in a batch must share the feature dimension")
        n = g.num_nodes
        X[b * n_max: b * n_max + n] = g.features
        mask[b * n_max: b * n_max + n] = 1.0
        pool[b, b * n_max: b * n_max + n] = 1.0
        Ab = np.zeros((n_max, n_max))
        Ab[:n, :n] = g.adjacency
        blocks.append(Ab)
    labels = None
    if all(g.graph_label is not None for g in graphs):
        labels = np.array([g.graph_label for g in graphs], dtype=np.int64)
    return GraphBatch(X, sp.block_diag(blocks, format="csr"), mask, pool, counts, n_max, labels, list(graphs))


def spec_dict(spec):
    return asdict(spec)
