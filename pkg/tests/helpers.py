"""Small builders shared by several test modules."""

from __future__ import annotations

import numpy as np

from fedet.numerics import DenseLayer


def random_mlp(rng, widths, scale=0.7):
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        act = "identity" if i == len(widths) - 2 else "relu"
        layers.append(DenseLayer(rng.normal(size=(b, a)) * scale, rng.normal(size=b) * 0.1, act))
    return layers


def random_simplex(rng, n, rows=None):
    return rng.dirichlet(np.ones(n), size=rows)


def params_equal(a, b):
    la, lb = a.layers, b.layers
    return len(la) == len(lb) and all(
        np.array_equal(x.weights, y.weights) and np.array_equal(x.bias, y.bias) for x, y in zip(la, lb)
    )
