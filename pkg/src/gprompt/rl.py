"""Hybrid discrete-continuous PPO for selecting and editing node prompts.

A discrete actor scores every node of the current state and picks one; a
continuous actor proposes an edit vector for that node; a critic values the
flattened (zero-padded) state. Both actors are trained with clipped PPO
surrogates against one set of GAE advantages; the critic with MSE to the
discounted returns.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DegenerateDensityError, EmptyGraphError
from .nn import MLP, load_into, state_of
from .prompt import apply_prompt

log = logging.getLogger(__name__)

MASK_PENALTY = 1e9
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RlConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    beta_d: float = 0.01
    beta_c: float = 0.01
    theta: float = 0.5
    lambda_e: float = 1e-4
    horizon: float = 0.25
    update_interval: int = 3
    sigma: float = 0.1
    lr: float = 5e-4
    minibatch: int = 64
    ppo_epochs: int = 1
    optimizer: str = "sgd"
    node_selection: str = "sample"

    def validate(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.clip <= 0:
            raise ConfigError("clip must be > 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.theta <= 0:
            raise ConfigError("theta must be > 0")
        if self.update_interval < 1:
            raise ConfigError("update_interval must be >= 1")
        if self.node_selection not in ("sample", "greedy"):
            raise ConfigError(f"node_selection must be 'sample' or 'greedy', got {self.node_selection!r}")
        return self


class PolicyBundle:
    """Discrete actor, continuous actor and critic, plus the exploration std ``sigma``."""

    def __init__(self, state_dim, edit_dim, n_max, hidden=32, sigma=0.1, seed=0):
        if sigma < 0:
            raise ConfigError("sigma must be >= 0")
        rng = np.random.default_rng(seed)
        self.state_dim, self.edit_dim, self.n_max = state_dim, edit_dim, n_max
        self.discrete = MLP([state_dim, hidden, 1], rng, name="actor_d")
        self.continuous = MLP([state_dim, hidden, edit_dim], rng, name="actor_c")
        self.critic = MLP([n_max * state_dim, hidden, 1], rng, name="critic")
        self.sigma = float(sigma)

    def parameters(self):
        return self.discrete.parameters() + self.continuous.parameters() + self.critic.parameters()

    def state(self):
        s = state_of(self.parameters())
        s["sigma"] = np.array([[self.sigma]])
        return s

    def load_state(self, state):
        load_into(self.parameters(), state)
        self.sigma = float(np.asarray(state["sigma"]).reshape(-1)[0])


@dataclass(frozen=True, eq=False)
class HybridAction:
    node: int
    mean: np.ndarray
    sample: np.ndarray
    delta: np.ndarray


@dataclass(eq=False)
class Transition:
    state: np.ndarray  # n_max x H, zero rows for padding
    mask: np.ndarray  # n_max
    node: int
    mean: np.ndarray
    sample: np.ndarray  # pre-clamp Gaussian draw
    delta: np.ndarray
    logp_discrete: float
    logp_continuous: float
    reward: float
    value: float
    graph: int = -1
    step: int = 0
    advantage: float = 0.0
    ret: float = 0.0

    @property
    def action(self):
        return HybridAction(self.node, self.mean, self.sample, self.delta)


# ---- state and actors ----

def compute_state(backbone, X, A, prompts):
    """Backbone node representations of the prompted graph (evaluation mode)."""
    return backbone(apply_prompt(ad.as_tensor(X), prompts), A, training=False).value


def discrete_log_probs(bundle: PolicyBundle, states, mask):
    """Masked log-softmax over nodes for a padded block of states: B x n_max."""
    n_max = bundle.n_max
    rows = ad.as_tensor(states).shape[0]
    B = rows // n_max
    logits = ad.reshape(bundle.discrete(states), (B, n_max))
    bias = (np.asarray(mask, dtype=np.float64).reshape(B, n_max) - 1.0) * MASK_PENALTY
    return ad.log_softmax(ad.add(logits, bias))


def discrete_policy(bundle: PolicyBundle, state):
    """Node-selection distribution for one unpadded N x H state."""
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 2 or state.shape[0] == 0:
        raise EmptyGraphError("discrete policy needs at least one node")
    logits = ad.reshape(bundle.discrete(state), (1, state.shape[0]))
    return ad.row_softmax(logits).value[0]


def sample_node(probs, mode="greedy", rng=None):
    """Greedy: argmax with ties going to the lowest index. Sample: inverse-CDF draw."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise EmptyGraphError("cannot select a node from an empty distribution")
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode != "sample":
        raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    u = rng.random()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    idx = min(idx, probs.size - 1)
    while probs[idx] == 0.0:
        idx -= 1
    return idx


def continuous_policy(bundle: PolicyBundle, state, node, sigma, rng=None, theta=0.5):
    """Edit vector for ``node``: Gaussian around the encoder output, then clamped."""
    state = np.asarray(state, dtype=np.float64)
    if not 0 <= node < state.shape[0]:
        raise IndexError(f"node {node} out of range for {state.shape[0]} nodes")
    z = bundle.continuous(state[node:node + 1]).value[0]
    if sigma > 0:
        x = z + sigma * rng.standard_normal(z.shape)
    else:
        x = z.copy()
    return HybridAction(int(node), z, x, np.clip(x, -theta, theta))


def continuous_actions(bundle: PolicyBundle, rows, sigma, rngs, theta=0.5):
    """Batched :func:`continuous_policy`: one state row and one generator per action.

    Draws match calling :func:`continuous_policy` row by row with the same generators.
    """
    rows = np.asarray(rows, dtype=np.float64)
    Z = bundle.continuous(rows).value
    out = []
    for z, rng in zip(Z, rngs):
        x = z + sigma * rng.standard_normal(z.shape) if sigma > 0 else z.copy()
        out.append((z, x, np.clip(x, -theta, theta)))
    return out


def gaussian_log_prob_np(sample, mean, sigma):
    """Closed-form diagonal Gaussian log-density per row (no tape)."""
    if sigma <= 0:
        raise DegenerateDensityError("Gaussian log-density needs sigma > 0")
    diff = np.atleast_2d(sample) - np.atleast_2d(mean)
    d = diff.shape[1]
    return -0.5 * np.sum(diff * diff, axis=1) / sigma ** 2 - d * (math.log(sigma) + 0.5 * LOG_2PI)


def gaussian_log_prob(sample, mean, sigma):
    """Diagonal Gaussian log-density of each row of ``sample`` (rows x 1)."""
    if sigma <= 0:
        raise DegenerateDensityError("Gaussian log-density needs sigma > 0")
    diff = ad.sub(sample, mean)
    d = ad.as_tensor(mean).shape[1]
    quad = ad.scale(ad.sum_cols(ad.square(diff)), -0.5 / sigma ** 2)
    return ad.add(quad, -d * (math.log(sigma) + 0.5 * LOG_2PI))


def gaussian_entropy(dim, sigma):
    if sigma <= 0:
        raise DegenerateDensityError("Gaussian entropy needs sigma > 0")
    return dim * (0.5 * (1.0 + LOG_2PI) + math.log(sigma))


# ---- rewards, returns, advantages ----

def reward(loss_prev, loss_curr, ecr_t, lambda_e):
    return lambda_e * ecr_t + loss_prev - loss_curr


def discounted_returns(rewards, gamma):
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, gamma, lam):
    """GAE advantages. ``values`` holds V(s^t) per step, optionally plus a bootstrap.

    Without a bootstrap entry the value after the last step is taken as 0.
    """
    T = len(rewards)
    v = np.asarray(values, dtype=np.float64)
    if v.size == T:
        v = np.append(v, 0.0)
    elif v.size != T + 1:
        raise ValueError(f"expected {T} or {T + 1} values, got {v.size}")
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


# ---- PPO objectives ----

def clipped_surrogate(logp_new, logp_old, advantages, clip):
    """Batch mean of ``min(k A, clip(k, 1-e, 1+e) A)`` with ``k = exp(logp_new - logp_old)``."""
    logp_old = np.asarray(logp_old, dtype=np.float64).reshape(-1, 1)
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1, 1)
    ratio = ad.exp(ad.sub(logp_new, logp_old))
    unclipped = ad.mul(ratio, adv)
    clipped = ad.mul(ad.clamp(ratio, 1.0 - clip, 1.0 + clip), adv)
    return ad.mean(ad.minimum(unclipped, clipped))


@dataclass(eq=False)
class TransitionBatch:
    states: np.ndarray  # (B * n_max) x H
    masks: np.ndarray  # (B * n_max) x 1
    nodes: np.ndarray  # B
    samples: np.ndarray  # B x D
    logp_discrete: np.ndarray
    logp_continuous: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    @property
    def size(self):
        return len(self.nodes)

    @classmethod
    def stack(cls, transitions):
        return cls(
            states=np.concatenate([t.state for t in transitions]),
            masks=np.concatenate([t.mask for t in transitions]).reshape(-1, 1),
            nodes=np.array([t.node for t in transitions], dtype=np.int64),
            samples=np.stack([t.sample for t in transitions]),
            logp_discrete=np.array([t.logp_discrete for t in transitions]),
            logp_continuous=np.array([t.logp_continuous for t in transitions]),
            advantages=np.array([t.advantage for t in transitions]),
            returns=np.array([t.ret for t in transitions]),
        )

    def subset(self, idx, n_max):
        rows = (idx[:, None] * n_max + np.arange(n_max)).reshape(-1)
        return TransitionBatch(self.states[rows], self.masks[rows], self.nodes[idx], self.samples[idx],
                               self.logp_discrete[idx], self.logp_continuous[idx],
                               self.advantages[idx], self.returns[idx])


def discrete_terms(bundle, batch: TransitionBatch):
    """(log-prob of the stored node, mean categorical entropy) under the current actor."""
    logp = discrete_log_probs(bundle, batch.states, batch.masks)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(batch.size), batch.nodes] = 1.0
    chosen = ad.sum_cols(ad.mul(logp, onehot))
    probs = ad.exp(logp)
    entropy = ad.scale(ad.total(ad.mul(probs, logp)), -1.0 / batch.size)
    return chosen, entropy


def ppo_loss_discrete(bundle, batch: TransitionBatch, advantages, clip, beta_d):
    """Discrete surrogate objective (to be maximised)."""
    logp, entropy = discrete_terms(bundle, batch)
    surrogate = clipped_surrogate(logp, batch.logp_discrete, advantages, clip)
    return ad.add(surrogate, ad.scale(entropy, beta_d))


def continuous_terms(bundle, batch: TransitionBatch, sigma):
    rows = np.arange(batch.size) * bundle.n_max + batch.nodes
    means = bundle.continuous(ad.take_rows(batch.states, rows))
    return gaussian_log_prob(batch.samples, means, sigma)


def ppo_loss_continuous(bundle, batch: TransitionBatch, advantages, clip, beta_c, sigma=None):
    """Continuous surrogate objective (to be maximised); needs sigma > 0."""
    sigma = bundle.sigma if sigma is None else sigma
    if sigma <= 0:
        raise DegenerateDensityError("policy updates need sigma > 0")
    logp = continuous_terms(bundle, batch, sigma)
    surrogate = clipped_surrogate(logp, batch.logp_continuous, advantages, clip)
    return ad.add(surrogate, beta_c * gaussian_entropy(bundle.edit_dim, sigma))


def critic_value(bundle: PolicyBundle, states, mask=None):
    """Values for a padded block of states: B x 1."""
    states = ad.as_tensor(states)
    if mask is not None:
        states = ad.mul(states, np.asarray(mask, dtype=np.float64).reshape(-1, 1))
    B = states.shape[0] // bundle.n_max
    return bundle.critic(ad.reshape(states, (B, bundle.n_max * bundle.state_dim)))


def critic_loss(values, returns):
    return ad.mse(values, np.asarray(returns, dtype=np.float64).reshape(-1, 1))


# ---- updates ----

class PolicyOptimizers:
    def __init__(self, bundle, config: RlConfig):
        make = lambda ps: ad.make_optimizer(config.optimizer, ps, config.lr)  # noqa: E731
        self.discrete = make(bundle.discrete.parameters())
        self.continuous = make(bundle.continuous.parameters())
        self.critic = make(bundle.critic.parameters())


def _standardize(a):
    if a.size < 2:
        return a
    std = a.std()
    return (a - a.mean()) / std if std > 0 else a - a.mean()


def update_policies(transitions, bundle: PolicyBundle, config: RlConfig, optimizers=None, rng=None):
    """One PPO pass over ``transitions`` for both actors and the critic; updates in place."""
    if not transitions:
        log.warning("update_policies called with an empty trajectory buffer; skipping")
        return bundle
    if bundle.sigma <= 0:
        raise DegenerateDensityError("policy updates need sigma > 0")
    optimizers = optimizers or PolicyOptimizers(bundle, config)
    data = TransitionBatch.stack(transitions)
    n = data.size
    for _ in range(config.ppo_epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, config.minibatch):
            mb = data.subset(order[start:start + config.minibatch], bundle.n_max)
            adv = _standardize(mb.advantages)
            with ad.Tape() as tape:
                loss = ad.scale(ppo_loss_discrete(bundle, mb, adv, config.clip, config.beta_d), -1.0)
            optimizers.discrete.step(tape.gradients(loss, bundle.discrete.parameters()))
            with ad.Tape() as tape:
                loss = ad.scale(ppo_loss_continuous(bundle, mb, adv, config.clip, config.beta_c), -1.0)
            optimizers.continuous.step(tape.gradients(loss, bundle.continuous.parameters()))
            with ad.Tape() as tape:
                loss = critic_loss(critic_value(bundle, mb.states, mb.masks), mb.returns)
            optimizers.critic.step(tape.gradients(loss, bundle.critic.parameters()))
    return bundle


def dump_trajectories(transitions, fh):
    """One JSON record per transition."""
    for t in transitions:
        fh.write(json.dumps({
            "graph": t.graph, "step": t.step, "node": t.node, "reward": t.reward, "value": t.value,
            "logp_discrete": t.logp_discrete, "logp_continuous": t.logp_continuous,
        }, sort_keys=True) + "\n")
