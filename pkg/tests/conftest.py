from __future__ import annotations

import numpy as np
import pytest

from condloc import numerics as nx


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_grad(build, x: np.ndarray, name: str = "x") -> float:
    """Relative error between backward() and central differences for ``build(graph, leaf)``."""
    g = nx.Graph()
    loss = build(g, g.leaf(x, name))
    analytic = nx.backward(g, loss)[name]

    def f(v):
        gg = nx.Graph()
        return build(gg, gg.leaf(v, name)).data

    return rel_err(analytic, nx.finite_diff_gradient(f, x, 1e-6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
