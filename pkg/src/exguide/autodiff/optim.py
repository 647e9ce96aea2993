from __future__ import annotations

import numpy as np

from .layers import ParamSet

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


def optimizer_step(params: ParamSet, lr: float, kind: str = "adam", clip: float | None = None) -> None:
    """Apply one update to every parameter of ``params`` and zero the gradients.

    ``clip`` rescales the whole set's gradient to at most that global norm.
    """
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    grads = {}
    for name, p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"{params.name}/{name}" if params.name else name)
        grads[name] = g
    if clip is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > clip:
            grads = {k: g * (clip / total) for k, g in grads.items()}
    params.step += 1
    t = params.step
    b1, b2 = ADAM_BETAS
    for name, p in params:
        g = grads[name]
        if kind == "sgd":
            p.value = p.value - lr * g
        else:
            m = b1 * params.m[name] + (1 - b1) * g
            v = b2 * params.v[name] + (1 - b2) * g * g
            params.m[name], params.v[name] = m, v
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.value = p.value - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        p.zero_grad()
