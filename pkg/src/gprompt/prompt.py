"""Universal feature prompts: k-basis attentive prompts, edits and edit coverage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .nn import load_into, state_of

INIT_RANGE = 0.01


class PromptBasis:
    """``k`` basis prompt vectors and ``k`` projections, both k x D."""

    kind = "attentive"

    def __init__(self, k, dim, seed=0, basis=None, projections=None):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        rng = np.random.default_rng(seed)
        if basis is None:
            basis = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(k, dim))
        if projections is None:
            projections = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(k, dim))
        self.basis = ad.parameter(basis, name="prompt.basis")
        self.projections = ad.parameter(projections, name="prompt.projections")
        if self.basis.shape != (k, dim) or self.projections.shape != (k, dim):
            raise ShapeError(f"basis/projections must be {(k, dim)}, got {self.basis.shape} and {self.projections.shape}")

    @property
    def k(self):
        return self.basis.shape[0]

    @property
    def dim(self):
        return self.basis.shape[1]

    def __call__(self, X, n_max=None):
        return attentive_prompts(X, self)

    def parameters(self):
        return [self.basis, self.projections]

    def state(self):
        return state_of(self.parameters())

    def load_state(self, state):
        load_into(self.parameters(), state)


def attention_weights(X, basis: PromptBasis):
    """``alpha[i, j] = softmax_j(a_j . x_i)``, N x k."""
    X = ad.as_tensor(X)
    if X.shape[1] != basis.dim:
        raise ShapeError(f"features {X.shape} do not match prompt dimension {basis.dim}")
    return ad.row_softmax(ad.matmul(X, ad.transpose(basis.projections)))


def attentive_prompts(X, basis: PromptBasis):
    """One prompt per node: attention-weighted mix of the basis rows."""
    return ad.matmul(attention_weights(X, basis), basis.basis)


class SharedPrompt:
    """A single learnable vector added to every node."""

    kind = "shared"

    def __init__(self, dim, seed=0):
        rng = np.random.default_rng(seed)
        self.vector = ad.parameter(rng.uniform(-INIT_RANGE, INIT_RANGE, size=(1, dim)), name="prompt.shared")

    def __call__(self, X, n_max=None):
        rows = ad.as_tensor(X).shape[0]
        return ad.take_rows(self.vector, np.zeros(rows, dtype=np.int64))

    def parameters(self):
        return [self.vector]

    def state(self):
        return state_of(self.parameters())

    def load_state(self, state):
        load_into(self.parameters(), state)


class PerNodePrompt:
    """An independent learnable vector for each node position (up to ``n_max``)."""

    kind = "per_node"

    def __init__(self, n_max, dim, seed=0):
        rng = np.random.default_rng(seed)
        self.table = ad.parameter(rng.uniform(-INIT_RANGE, INIT_RANGE, size=(n_max, dim)), name="prompt.per_node")

    def __call__(self, X, n_max=None):
        rows = ad.as_tensor(X).shape[0]
        n_max = self.table.shape[0] if n_max is None else n_max
        if n_max > self.table.shape[0] or rows % n_max:
            raise ShapeError(f"{rows} rows cannot be laid out in blocks of {n_max} <= {self.table.shape[0]}")
        return ad.take_rows(self.table, np.tile(np.arange(n_max), rows // n_max))

    def parameters(self):
        return [self.table]

    def state(self):
        return state_of(self.parameters())

    def load_state(self, state):
        load_into(self.parameters(), state)


def apply_prompt(X, prompts):
    return ad.add(X, prompts)


@dataclass(frozen=True, eq=False)
class PromptState:
    prompts: np.ndarray
    counts: np.ndarray
    step: int = 0

    @classmethod
    def start(cls, prompts):
        p = np.array(prompts, dtype=np.float64)
        return cls(p, np.zeros(p.shape[0], dtype=np.int64), 0)


def edit(state: PromptState, node, delta) -> PromptState:
    """Add ``delta`` to the prompt of ``node`` and bump its edit count."""
    n = state.prompts.shape[0]
    if not 0 <= node < n:
        raise IndexError(f"node {node} out of range for {n} prompts")
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if delta.shape[0] != state.prompts.shape[1]:
        raise ShapeError(f"edit of length {delta.shape[0]} for prompts of width {state.prompts.shape[1]}")
    prompts = state.prompts.copy()
    prompts[node] += delta
    counts = state.counts.copy()
    counts[node] += 1
    return PromptState(prompts, counts, state.step + 1)


def ecr(counts, n=None):
    """Fraction of the ``n`` nodes edited at least once."""
    counts = np.asarray(counts)
    n = counts.size if n is None else n
    if n <= 0:
        raise ValueError("ecr needs at least one node")
    return float(np.count_nonzero(counts)) / n
