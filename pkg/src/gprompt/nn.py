"""Linear layers and MLPs on top of the tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    def __init__(self, fan_in, fan_out, rng, name="linear"):
        self.weight = ad.parameter(glorot(rng, fan_in, fan_out), name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros((1, fan_out)), name=f"{name}.bias")

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    """Stack of linear layers with ReLU (and optional dropout) between them."""

    def __init__(self, sizes, rng, dropout=0.0, name="mlp"):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.dropout = dropout
        self.layers = [Linear(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]

    def __call__(self, x, training=False, rng=None):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
                if training and self.dropout > 0:
                    h = ad.dropout(h, self.dropout, rng, training=True)
        return h

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def state_of(params):
    return {p.name: p.value.copy() for p in params}


def load_into(params, state):
    for p in params:
        if p.name not in state:
            raise KeyError(f"missing tensor {p.name!r} in state")
        v = np.asarray(state[p.name], dtype=np.float64)
        if v.shape != p.value.shape:
            raise ValueError(f"tensor {p.name!r}: expected shape {p.value.shape}, got {v.shape}")
        p.value[...] = v
