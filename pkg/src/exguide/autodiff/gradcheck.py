from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Node, backward, param


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: Sequence[np.ndarray],
                 h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``f`` w.r.t. each array."""
    xs = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for x in xs:
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(xs))
            flat[i] = orig - h
            fm = float(f(xs))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(build: Callable[[list[Node]], Node], arrays: Sequence[np.ndarray],
                h: float = 1e-5) -> float:
    """Largest relative error between backward() and central differences."""
    nodes = [param(a) for a in arrays]
    root = build(nodes)
    backward(root)
    num = numeric_grad(lambda xs: build([Node(x) for x in xs]).value, arrays, h=h)
    return max(rel_error(n.grad, g) for n, g in zip(nodes, num))
