"""Backbones: an exact linear GNN and a GIN encoder, plus heads and pretraining."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ConfigError, SamplingError, ShapeError
from .graph import Graph, make_batch
from .nn import MLP, load_into, state_of


# ---- linear GNN ----

@dataclass
class LinearGnn:
    """Stack of linear message-passing layers ``H <- (A + (1+eps_l) I) H W_l``."""

    epsilons: list
    weights: list

    def __post_init__(self):
        if len(self.epsilons) != len(self.weights) or not self.weights:
            raise ConfigError("LinearGnn needs one epsilon per weight matrix and at least one layer")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"layer shapes {a.shape} and {b.shape} do not chain")

    @property
    def num_layers(self):
        return len(self.weights)

    @classmethod
    def random(cls, rng, dims, eps_range=(0.2, 1.0)):
        eps = [float(rng.uniform(*eps_range)) for _ in dims[1:]]
        Ws = [rng.standard_normal((a, b)) for a, b in zip(dims, dims[1:])]
        return cls(eps, Ws)


def diffusion_product(A, epsilons):
    """``S_L ... S_1`` with ``S_l = A + (1 + eps_l) I``."""
    A = np.asarray(A, dtype=np.float64)
    eye = np.eye(A.shape[0])
    P = eye
    for eps in epsilons:
        P = (A + (1.0 + eps) * eye) @ P
    return P


def weight_product(model: LinearGnn):
    W = model.weights[0]
    for Wl in model.weights[1:]:
        W = W @ Wl
    return W


def linear_forward(model: LinearGnn, X, A):
    """Layer-by-layer evaluation of ``(prod S_l) X (prod W_l)``."""
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if X.shape[0] != A.shape[0] or A.shape[0] != A.shape[1]:
        raise ShapeError(f"features {X.shape} and adjacency {A.shape} disagree")
    if X.shape[1] != model.weights[0].shape[0]:
        raise ShapeError(f"features {X.shape} do not match first weight {model.weights[0].shape}")
    H = X
    eye = np.eye(A.shape[0])
    for eps, W in zip(model.epsilons, model.weights):
        H = (A + (1.0 + eps) * eye) @ H @ W
    return H


# ---- GIN ----

class GinModel:
    """GIN encoder: ``h <- MLP((1 + eps) h + sum of neighbour h)`` per layer.

    Each MLP is Linear-ReLU-Linear. ReLU and dropout follow every layer except
    the last.
    """

    def __init__(self, in_dim, hidden=32, layers=3, dropout=0.5, learn_eps=False, seed=0):
        if layers < 1 or hidden < 1 or in_dim < 1:
            raise ConfigError("GIN needs positive in_dim, hidden and layer count")
        rng = np.random.default_rng(seed)
        self.in_dim, self.hidden, self.dropout, self.learn_eps = in_dim, hidden, dropout, learn_eps
        self.mlps = []
        self.eps = []
        for i in range(layers):
            self.mlps.append(MLP([in_dim if i == 0 else hidden, hidden, hidden], rng, name=f"gin.{i}"))
            self.eps.append(ad.Tensor(0.0, requires_grad=learn_eps, name=f"gin.{i}.eps"))

    @property
    def num_layers(self):
        return len(self.mlps)

    @property
    def frozen(self):
        return all(p.frozen for p in self.parameters())

    def parameters(self):
        ps = [p for m in self.mlps for p in m.parameters()]
        if self.learn_eps:
            ps += self.eps
        return ps

    def freeze(self):
        for p in self.parameters():
            p.frozen = True
            p.requires_grad = False
        for e in self.eps:
            e.requires_grad = False
        return self

    def __call__(self, X, A, training=False, rng=None):
        X = ad.as_tensor(X)
        if X.shape[1] != self.in_dim:
            raise ShapeError(f"GIN expects {self.in_dim} input features, got shape {X.shape}")
        sparse = sp.issparse(A)
        if not sparse:
            A = np.asarray(A, dtype=np.float64)
        if A.shape != (X.shape[0], X.shape[0]):
            raise ShapeError(f"adjacency {A.shape} does not match features {X.shape}")
        h = X
        last = self.num_layers - 1
        for i, (mlp, eps) in enumerate(zip(self.mlps, self.eps)):
            if self.learn_eps:
                self_term = ad.mul(h, ad.add(eps, 1.0))
            else:
                self_term = ad.scale(h, 1.0 + eps.item())
            agg = ad.sparse_matmul(A, h) if sparse else ad.matmul(A, h)
            h = mlp(ad.add(self_term, agg))
            if i < last:
                h = ad.relu(h)
                if training:
                    h = ad.dropout(h, self.dropout, rng, training=True)
        return h

    def state(self):
        s = state_of(self.parameters())
        for e in self.eps:
            s[e.name] = e.value.copy()
        return s

    def load_state(self, state):
        load_into([p for m in self.mlps for p in m.parameters()] + self.eps, state)

    def checksum(self):
        h = hashlib.sha256()
        for name, v in sorted(self.state().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def gin_forward(model: GinModel, X, A, mode="eval", seed=None):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = np.random.default_rng(seed) if mode == "train" else None
    return model(X, A, training=mode == "train", rng=rng)


def readout(h, kind="sum"):
    """Pool node embeddings of one graph to a 1 x H vector."""
    if kind == "sum":
        return ad.sum_rows(h)
    if kind == "mean":
        return ad.scale(ad.sum_rows(h), 1.0 / ad.as_tensor(h).shape[0])
    raise ValueError(f"unknown readout {kind!r}")


def batch_readout(h, batch, kind="sum"):
    """Per-graph pooling over a padded block batch: B x H."""
    pool = batch.pool if kind == "sum" else batch.pool / batch.counts[:, None]
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown readout {kind!r}")
    return ad.matmul(pool, h)


class ProjectionHead:
    """MLP head with ``layers`` linear layers mapping pooled embeddings to class logits."""

    def __init__(self, in_dim, num_classes, layers=1, hidden=32, dropout=0.5, seed=0):
        if not 1 <= layers <= 3:
            raise ConfigError(f"projection head layers must be 1..3, got {layers}")
        rng = np.random.default_rng(seed)
        self.mlp = MLP([in_dim] + [hidden] * (layers - 1) + [num_classes], rng, dropout=dropout, name="head")
        self.num_classes = num_classes

    def __call__(self, z, training=False, rng=None):
        return self.mlp(z, training=training, rng=rng)

    def parameters(self):
        return self.mlp.parameters()

    def state(self):
        return state_of(self.parameters())

    def load_state(self, state):
        load_into(self.parameters(), state)


# ---- masked-edge pretraining ----

@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    mask_rate: float = 0.2
    optimizer: str = "adam"
    history: list = field(default_factory=list)


def _edge_samples(g: Graph, rng, mask_rate):
    """Masked positive edges and an equal number of sampled non-edges."""
    n = g.num_nodes
    edges = g.edges()
    iu, ju = np.triu_indices(n, k=1)
    non = np.flatnonzero(g.adjacency[iu, ju] == 0)
    if not edges:
        return [], [], g.adjacency
    if non.size == 0:
        raise SamplingError(f"graph with {n} nodes is complete; no negative pair to sample")
    k = max(1, int(round(mask_rate * len(edges))))
    k = min(k, non.size, len(edges))
    pos = [edges[i] for i in rng.choice(len(edges), size=k, replace=False)]
    neg_idx = rng.choice(non.size, size=k, replace=False)
    neg = list(zip(iu[non[neg_idx]].tolist(), ju[non[neg_idx]].tolist()))
    A = g.adjacency.copy()
    for u, v in pos:
        A[u, v] = A[v, u] = 0.0
    return pos, neg, A


def edge_logits(model: GinModel, X, A, pairs, training=False, rng=None):
    """``h_u . h_v`` per pair (pairs x 1)."""
    h = model(X, A, training=training, rng=rng)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return ad.sum_cols(ad.mul(ad.take_rows(h, pairs[:, 0]), ad.take_rows(h, pairs[:, 1])))


def edge_scores(model: GinModel, X, A, pairs, training=False, rng=None):
    """Edge probabilities ``sigmoid(h_u . h_v)``."""
    return ad.sigmoid(edge_logits(model, X, A, pairs, training, rng))


def pretrain_masked_edge(model: GinModel, graphs, config: PretrainConfig, seed=0) -> GinModel:
    """Masked-edge pretraining: BCE on ``sigmoid(h_u . h_v)`` for masked edges vs. non-edges.

    Returns the same model, frozen. Per-epoch mean losses land in ``config.history``.
    """
    if not any(g.edges() for g in graphs):
        raise SamplingError("pretraining needs at least one graph with an edge")
    rng = np.random.default_rng(seed)
    opt = ad.make_optimizer(config.optimizer, model.parameters(), config.lr)
    config.history.clear()
    n_max = max(g.num_nodes for g in graphs)
    for _ in range(config.epochs):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [graphs[i] for i in order[start:start + config.batch_size]]
            pairs, labels, adjs = [], [], []
            for b, g in enumerate(chunk):
                pos, neg, A = _edge_samples(g, rng, config.mask_rate)
                off = b * n_max
                pairs += [(u + off, v + off) for u, v in pos] + [(u + off, v + off) for u, v in neg]
                labels += [1.0] * len(pos) + [0.0] * len(neg)
                adjs.append(Graph(A, g.features))
            if not pairs:
                continue
            batch = make_batch(adjs, n_max)
            with ad.Tape() as tape:
                scores = edge_logits(model, batch.features, batch.adjacency, pairs, training=True, rng=rng)
                loss = ad.bce_with_logits(scores, np.array(labels)[:, None])
            opt.step(tape.gradients(loss, model.parameters()))
            losses.append(loss.item())
        config.history.append(float(np.mean(losses)) if losses else float("nan"))
    return model.freeze()
