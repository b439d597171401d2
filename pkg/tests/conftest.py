"""Shared instance builders for the test suite."""

import numpy as np

from fclr import build_constraints, build_gram, make_basis


def softmax_blocks(rng, n, sizes, v, scale=2.0):
    blocks = []
    for s in sizes:
        w = rng.normal(0.0, scale, size=(n, s, v))
        e = np.exp(w - w.max(axis=1, keepdims=True))
        blocks.append(e / e.sum(axis=1, keepdims=True))
    return tuple(blocks)


def random_instance(seed, n=30, sizes=(3, 3), k=3, v=10, order=3,
                    signal_rows=((0, 1.0), (1, -1.0)), noise=0.5,
                    y_scale=1.0):
    """Small compositional regression instance and its Gram system.

    Returns (sys, cons, spec, Z, Z_c, y, grid).
    """
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, v)
    spec = make_basis(min(order, k), k, (0.0, 1.0))
    blocks = softmax_blocks(rng, n, sizes, v)
    Z = np.log(np.concatenate(blocks, axis=1))
    Z_c = np.ones((n, 1, v))
    p = sum(sizes)
    signal = np.zeros((n, v))
    for row, coef in signal_rows:
        signal += coef * Z[:, row, :]
    y = y_scale * (signal + noise * rng.normal(size=(n, v)))
    sys_ = build_gram(Z, Z_c, y, spec, grid)
    cons = build_constraints(sizes, k)
    return sys_, cons, spec, Z, Z_c, y, grid
