"""Parameter containers, dense layers and a GRU cell on top of the autodiff core."""
from __future__ import annotations

import numpy as np

from .core import Node, add, concat, matmul, mul, param, relu, sigmoid, slice_, sub, tanh

ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}


class ParamSet:
    """Named parameters of one network plus the optimizer state that goes with them."""

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, Node] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already owned by {self.name!r}")
        node = param(value)
        self.params[name] = node
        self.m[name] = np.zeros_like(node.value)
        self.v[name] = np.zeros_like(node.value)
        return node

    def __getitem__(self, name) -> Node:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"{self.name}/{k}: checkpoint shape {v.shape} != {p.value.shape}")
            p.value = v.copy()

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Linear:
    def __init__(self, params: ParamSet, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, scale: float = 1.0):
        self.W = params.add(f"{name}.W", scale * glorot(rng, n_in, n_out))
        self.b = params.add(f"{name}.b", np.zeros(n_out))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Node:
        return add(matmul(x, self.W), self.b)


class MLP:
    def __init__(self, params: ParamSet, name: str, sizes, rng: np.random.Generator,
                 act: str = "tanh", out_scale: float = 1.0):
        self.act = ACTIVATIONS[act]
        n = len(sizes) - 1
        self.layers = [
            Linear(params, f"{name}.{i}", sizes[i], sizes[i + 1], rng,
                   scale=out_scale if i == n - 1 else 1.0)
            for i in range(n)
        ]

    def __call__(self, x) -> Node:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


class GRUCell:
    """Standard GRU: gates from one fused input and one fused recurrent matmul."""

    def __init__(self, params: ParamSet, name: str, n_in: int, hidden: int,
                 rng: np.random.Generator):
        self.hidden = hidden
        self.Wx = params.add(f"{name}.Wx", glorot(rng, n_in, 3 * hidden))
        self.Wh = params.add(f"{name}.Wh", np.concatenate(
            [glorot(rng, hidden, hidden) for _ in range(3)], axis=1))
        self.b = params.add(f"{name}.b", np.zeros(3 * hidden))

    def __call__(self, x, h) -> Node:
        H = self.hidden
        gx = add(matmul(x, self.Wx), self.b)
        gh = matmul(h, self.Wh)
        r = sigmoid(add(slice_(gx, (slice(None), slice(0, H))), slice_(gh, (slice(None), slice(0, H)))))
        u = sigmoid(add(slice_(gx, (slice(None), slice(H, 2 * H))), slice_(gh, (slice(None), slice(H, 2 * H)))))
        n = tanh(add(slice_(gx, (slice(None), slice(2 * H, 3 * H))),
                     mul(r, slice_(gh, (slice(None), slice(2 * H, 3 * H))))))
        # h' = n + u * (h - n)
        return add(n, mul(u, sub(h, n)))

    def init_state(self, batch: int) -> Node:
        return Node(np.zeros((batch, self.hidden)))


def stack_inputs(*xs) -> Node:
    return concat(xs, axis=-1)
