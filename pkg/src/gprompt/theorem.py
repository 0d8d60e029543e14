"""Constructive checks that per-node feature prompts can emulate graph manipulations.

For a linear GNN ``f(A, X) = S' X W'`` (``S'`` the product of per-layer
diffusion matrices), each routine builds a prompt matrix ``p`` and reports
how far ``f(A, X + p)`` is from the manipulated graph's output, measured with
independent forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gnn import LinearGnn, diffusion_product, linear_forward
from .graph import Graph, _check_adjacency

RANK_RTOL = 1e-10
SOLVE_TOL = 1e-8
EPS_RANGE = (0.2, 1.0)
SPECTRAL_MARGIN = 0.2


@dataclass(frozen=True)
class FeatureMod:
    delta_x: np.ndarray


@dataclass(frozen=True)
class StructureMod:
    adjacency: np.ndarray


@dataclass(frozen=True)
class ComponentAdd:
    adjacency: np.ndarray
    features: np.ndarray


@dataclass
class EquivalenceReport:
    kind: str
    prompt: np.ndarray
    residual: float
    solvable: bool
    notes: str = ""
    extra: dict = field(default_factory=dict)


def _max_abs(a):
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0


def simulate_feature_mod(model: LinearGnn, g: Graph, delta_x) -> EquivalenceReport:
    delta_x = np.asarray(delta_x, dtype=np.float64)
    p = delta_x.copy()
    prompted = linear_forward(model, g.features + p, g.adjacency)
    target = linear_forward(model, g.features + delta_x, g.adjacency)
    return EquivalenceReport("feature", p, _max_abs(prompted - target), True, "p = delta X")


def _solve_square(M, rhs):
    """Dense LU solve; falls back to min-norm least squares when M is singular."""
    try:
        cond = np.linalg.cond(M)
    except np.linalg.LinAlgError:
        cond = np.inf
    if np.isfinite(cond) and cond < 1e12:
        return np.linalg.solve(M, rhs), "lu"
    return np.linalg.lstsq(M, rhs, rcond=None)[0], "lstsq"


def simulate_structure_mod(model: LinearGnn, g: Graph, adjacency_hat, tol=SOLVE_TOL) -> EquivalenceReport:
    """Solve ``S' p = (S'' - S') X`` where ``S''`` uses the modified adjacency."""
    A_hat = np.asarray(adjacency_hat, dtype=np.float64)
    _check_adjacency(A_hat)
    S1 = diffusion_product(g.adjacency, model.epsilons)
    S2 = diffusion_product(A_hat, model.epsilons)
    p, method = _solve_square(S1, (S2 - S1) @ g.features)
    prompted = linear_forward(model, g.features + p, g.adjacency)
    target = linear_forward(model, g.features, A_hat)
    residual = _max_abs(prompted - target)
    return EquivalenceReport("structure", p, residual, residual <= tol, f"solve={method}")


def simulate_component_add(model: LinearGnn, g: Graph, comp_adjacency, comp_features, tol=1e-6) -> EquivalenceReport:
    """Match the sum-pooled output of the graph augmented with a disconnected component.

    The component's pooled contribution ``1^T S'_c X_c`` is spread over the
    existing nodes with the minimum-norm solution of ``(S'^T 1)^T p = 1^T S'_c X_c``.
    """
    X_c = np.asarray(comp_features, dtype=np.float64).reshape(-1, g.feature_dim)
    M = X_c.shape[0]
    if M == 0:
        return EquivalenceReport("component", np.zeros_like(g.features), 0.0, True, "empty component")
    A_c = np.asarray(comp_adjacency, dtype=np.float64).reshape(M, M)
    _check_adjacency(A_c)
    N = g.num_nodes
    S1 = diffusion_product(g.adjacency, model.epsilons)
    Sc = diffusion_product(A_c, model.epsilons)
    u = S1.T @ np.ones(N)
    gain = np.ones(M) @ Sc @ X_c
    p = np.linalg.lstsq(u[None, :], gain[None, :], rcond=None)[0]
    A_aug = np.block([[g.adjacency, np.zeros((N, M))], [np.zeros((M, N)), A_c]])
    X_aug = np.vstack([g.features, X_c])
    prompted = linear_forward(model, g.features + p, g.adjacency).sum(axis=0)
    target = linear_forward(model, X_aug, A_aug).sum(axis=0)
    residual = _max_abs(prompted - target)
    return EquivalenceReport("component", p, residual, residual <= tol, "pooled (sum readout)")


@dataclass
class NecessityReport:
    forced_delta: np.ndarray
    consistent: bool
    residual: float
    isolated_delta: np.ndarray
    prompt: np.ndarray


def necessity_witness(model: LinearGnn, g: Graph, j, k, delta, tol=1e-9) -> NecessityReport:
    """Add edge (j, k), shift x_j by ``delta``, and forbid a prompt on node j.

    The prompt system ``S' p = (S'' - S') X + S'' delta e_j`` with row j of ``p``
    pinned to zero is consistent only for one ``delta*`` (``forced_delta``).
    ``residual`` is the least-squares residual of the pinned system at
    ``delta``. ``isolated_delta`` is the value forced on row j alone when every
    other prompt is zero as well; it equals ``-(Delta S X)_j / (1 + eps)`` for a
    single layer.
    """
    A = g.adjacency
    N = g.num_nodes
    if j == k or A[j, k] != 0:
        raise ValueError(f"edge ({j}, {k}) must be absent and j != k")
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    A_hat = A.copy()
    A_hat[j, k] = A_hat[k, j] = 1.0
    X = g.features
    S1 = diffusion_product(A, model.epsilons)
    S2 = diffusion_product(A_hat, model.epsilons)
    base = (S2 - S1) @ X
    e_j = np.zeros(N)
    e_j[j] = 1.0
    # unconstrained solution y = S1^{-1}(base + S2 e_j delta); row j must vanish
    y_base = np.linalg.solve(S1, base)
    y_dir = np.linalg.solve(S1, S2 @ e_j)
    forced = -y_base[j] / y_dir[j]
    rhs = base + np.outer(S2 @ e_j, delta)
    keep = np.arange(N) != j
    q, *_ = np.linalg.lstsq(S1[:, keep], rhs, rcond=None)
    residual = float(np.linalg.norm(S1[:, keep] @ q - rhs))
    p = np.zeros_like(X)
    p[keep] = q
    isolated = -base[j] / S2[j, j]
    consistent = bool(np.max(np.abs(delta - forced)) <= tol)
    return NecessityReport(forced, consistent, residual, isolated, p)


@dataclass
class RankReport:
    full_row_rank: bool
    min_singular_value: float
    rank: int


def row_rank_check(W) -> RankReport:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    s = np.linalg.svd(W, compute_uv=False)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > RANK_RTOL * smax)) if smax > 0 else 0
    smin = float(s[-1]) if s.size == W.shape[0] else 0.0
    return RankReport(rank == W.shape[0], smin, rank)


# ---- random trials ----

def random_simple_graph(rng, n, d, density=0.4):
    upper = np.triu(rng.random((n, n)) < density, k=1)
    A = (upper | upper.T).astype(np.float64)
    return Graph(A, rng.standard_normal((n, d)))


def well_conditioned_model(rng, A, dims, eps_range=EPS_RANGE, margin=SPECTRAL_MARGIN):
    """Random linear GNN whose per-layer eps keep ``A + (1+eps) I`` away from singular.

    Each eps is drawn from ``eps_range`` and redrawn while some eigenvalue of
    ``A + (1+eps) I`` lies within ``margin`` of zero. Returns None when the
    spectrum of ``A`` leaves no admissible eps.
    """
    lam = np.linalg.eigvalsh(np.asarray(A, dtype=np.float64))
    eps = []
    for _ in dims[1:]:
        for _ in range(200):
            e = float(rng.uniform(*eps_range))
            if np.min(np.abs(lam + 1.0 + e)) >= margin:
                break
        else:
            return None
        eps.append(e)
    Ws = [rng.standard_normal((a, b)) for a, b in zip(dims, dims[1:])]
    return LinearGnn(eps, Ws)


def random_trial(rng, kind, max_nodes=8, min_nodes=3, max_dim=6, min_dim=2, layers=(1, 2, 3)):
    """One random manipulation trial; returns a flat record."""
    n = int(rng.integers(min_nodes, max_nodes + 1))
    d = int(rng.integers(min_dim, max_dim + 1))
    L = int(rng.choice(layers))
    model = None
    while model is None:
        g = random_simple_graph(rng, n, d)
        model = well_conditioned_model(rng, g.adjacency, [d] * (L + 1))
    if kind == "feature":
        rep = simulate_feature_mod(model, g, rng.standard_normal((n, d)))
    elif kind == "structure":
        flips = np.triu(rng.random((n, n)) < 0.3, k=1)
        flips = flips | flips.T
        A_hat = np.where(flips, 1.0 - g.adjacency, g.adjacency)
        rep = simulate_structure_mod(model, g, A_hat)
    elif kind == "component":
        m = int(rng.integers(1, 4))
        Ac = random_simple_graph(rng, m, d).adjacency
        rep = simulate_component_add(model, g, Ac, rng.standard_normal((m, d)))
    else:
        raise ValueError(f"unknown trial kind {kind!r}")
    cond = float(np.linalg.cond(diffusion_product(g.adjacency, model.epsilons)))
    return {"kind": kind, "N": n, "D": d, "L": L, "residual": rep.residual, "solvable": rep.solvable,
            "cond": cond}


def random_necessity_trial(rng, max_nodes=8, min_nodes=3, max_dim=6, min_dim=2, layers=(1,)):
    """Witness at delta* and at a random delta at least 0.1 away from it (inf-norm)."""
    L = int(rng.choice(layers))
    while True:
        n = int(rng.integers(min_nodes, max_nodes + 1))
        d = int(rng.integers(min_dim, max_dim + 1))
        g = random_simple_graph(rng, n, d)
        missing = [(a, b) for a in range(n) for b in range(a + 1, n) if g.adjacency[a, b] == 0]
        model = well_conditioned_model(rng, g.adjacency, [d] * (L + 1))
        if missing and model is not None:
            break
    j, k = missing[int(rng.integers(len(missing)))]
    if rng.random() < 0.5:
        j, k = k, j
    probe = necessity_witness(model, g, j, k, np.zeros(d))
    at_star = necessity_witness(model, g, j, k, probe.forced_delta)
    offset = rng.uniform(-1.0, 1.0, size=d)
    i = int(rng.integers(d))
    offset[i] = np.sign(offset[i] or 1.0) * rng.uniform(0.1, 1.0)
    off = necessity_witness(model, g, j, k, probe.forced_delta + offset)
    return {
        "kind": "necessity", "N": n, "D": d, "L": L,
        "residual_at_forced": at_star.residual, "consistent_at_forced": at_star.consistent,
        "residual_off": off.residual, "consistent_off": off.consistent,
        "offset_inf": float(np.max(np.abs(offset))),
    }


# ---- suite ----

TOLERANCES = {"feature": 1e-12, "structure": 1e-8, "component": 1e-6, "necessity": 1e-9}
NECESSITY_GAP = 1e-3
SUFFICIENCY_KINDS = ("feature", "structure", "component")


def run_suite(cases=200, necessity=100, max_nodes=8, layers=(1, 2, 3), seed=0, min_nodes=3):
    """``cases`` random trials per manipulation plus ``necessity`` witness trials."""
    if max_nodes < min_nodes:
        raise ValueError(f"max_nodes must be >= {min_nodes}, got {max_nodes}")
    rng = np.random.default_rng(seed)
    trials = []
    for kind in SUFFICIENCY_KINDS:
        trials += [random_trial(rng, kind, max_nodes=max_nodes, min_nodes=min_nodes, layers=layers)
                   for _ in range(cases)]
    for _ in range(necessity):
        rec = random_necessity_trial(rng, max_nodes=max_nodes, min_nodes=min_nodes, layers=layers)
        rec["residual"] = rec["residual_at_forced"]
        trials.append(rec)
    return trials


def judge(trials, tolerances=None, gap=NECESSITY_GAP):
    """Mark each trial passed/failed; returns (all passed, per-kind max residual)."""
    tol = dict(TOLERANCES, **(tolerances or {}))
    worst = {}
    ok = True
    for t in trials:
        kind = t["kind"]
        if kind == "necessity":
            t["passed"] = bool(t["residual_at_forced"] <= tol[kind] and t["residual_off"] > gap)
        else:
            t["passed"] = bool(t["residual"] <= tol[kind])
        ok &= t["passed"]
        worst[kind] = max(worst.get(kind, 0.0), t["residual"])
    return ok, worst
