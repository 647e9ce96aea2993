"""Appearance/motion split of per-frame observations via swap reconstruction.

The encoder maps a frame to ``(b, h)``; the decoder must rebuild frame ``j``
from ``(b_i, h_j)`` of two random frames of one sequence, which pushes all
time-invariant content into ``b``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import checkpoint


class DivergenceError(RuntimeError):
    pass


@dataclass
class MotionFeatureSeq:
    features: np.ndarray  # C_f x T
    source_id: int

    @property
    def T(self) -> int:
        return self.features.shape[1]


class DisentangleModel:
    def __init__(self, d_in: int, c_b: int, c_h: int = 2, width: int = 64, seed: int = 0):
        if c_b + c_h > d_in:
            raise ValueError(f"code size {c_b}+{c_h} exceeds input size {d_in}")
        self.d_in, self.c_b, self.c_h = d_in, c_b, c_h
        rng = np.random.default_rng([seed, 11])
        self.enc_params = ad.ParamSet("dse")
        self.dec_params = ad.ParamSet("dec")
        self.enc = ad.MLP(self.enc_params, "enc", [d_in, width, width, c_b + c_h], rng)
        self.dec = ad.MLP(self.dec_params, "dec", [c_b + c_h, width, width, d_in], rng)

    @property
    def c_f(self) -> int:
        return self.c_h

    def sections(self) -> dict:
        return {"dse": self.enc_params, "dec": self.dec_params}

    def encode_node(self, x) -> tuple[ad.Node, ad.Node]:
        code = self.enc(x)
        return code[:, : self.c_b], code[:, self.c_b:]

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d_in:
            raise ad.ShapeError("encode", x.shape, (self.d_in,))
        b, h = self.encode_node(x)
        return b.value, h.value

    def decode(self, b, h) -> np.ndarray:
        return self.dec(ad.concat([np.atleast_2d(b), np.atleast_2d(h)], axis=1)).value


def swap_loss_batch(model: DisentangleModel, xi, xj) -> ad.Node:
    """Mean over rows of ||dec(b_i, h_j) - x_j||^2."""
    b_i, _ = model.encode_node(xi)
    _, h_j = model.encode_node(xj)
    rec = model.dec(ad.concat([b_i, h_j], axis=1))
    return ad.mul(ad.sq_norm(ad.sub(rec, xj)), 1.0 / rec.shape[0])


def swap_loss(model: DisentangleModel, obs: np.ndarray, i: int, j: int) -> ad.Node:
    T = len(obs)
    if i == j:
        raise ValueError("swap_loss needs i != j")
    if not (0 <= i < T and 0 <= j < T):
        raise IndexError(f"timesteps ({i}, {j}) outside sequence of length {T}")
    return swap_loss_batch(model, obs[i:i + 1], obs[j:j + 1])


def _sample_pairs(rng: np.random.Generator, n: int, T: int):
    i = rng.integers(T, size=n)
    j = (i + rng.integers(1, T, size=n)) % T  # uniform over j != i
    return i, j


def train_disentangle(model: DisentangleModel, sequences, epochs: int = 50, lr: float = 1e-3,
                      batch: int = 32, seed: int = 0, final_lr_frac: float = 0.1,
                      log=None) -> list[float]:
    """Adam on the mean swap loss; lr decays geometrically to ``final_lr_frac * lr``."""
    if not sequences:
        raise ValueError("train_disentangle needs a nonempty dataset")
    obs = np.stack([s.obs for s in sequences])
    n, T, _ = obs.shape
    if T < 2:
        raise ValueError("swap reconstruction needs sequences with T >= 2")
    rng = np.random.default_rng([seed, 12])
    curve = []
    for ep in range(epochs):
        ep_lr = lr * final_lr_frac ** (ep / max(epochs - 1, 1))
        order = rng.permutation(n)
        tot = 0.0
        for k in range(0, n, batch):
            idx = order[k:k + batch]
            i, j = _sample_pairs(rng, len(idx), T)
            loss = swap_loss_batch(model, obs[idx, i], obs[idx, j])
            val = float(loss.value)
            if not np.isfinite(val) or val > 1e3:
                raise DivergenceError(f"swap loss {val:.3g} at epoch {ep}, batch {k // batch}")
            ad.backward(loss)
            ad.optimizer_step(model.enc_params, ep_lr)
            ad.optimizer_step(model.dec_params, ep_lr)
            tot += val * len(idx)
        curve.append(tot / n)
        if log:
            log(f"disentangle epoch {ep}: swap loss {curve[-1]:.3e}")
    return curve


def extract_features(model, seq) -> MotionFeatureSeq:
    obs = seq.obs if hasattr(seq, "obs") else np.asarray(seq)
    if len(obs) < 1:
        raise ValueError("extract_features needs at least one frame")
    _, h = model.encode(obs)
    return MotionFeatureSeq(h.T.copy(), getattr(seq, "id", -1))


class PositionFeatures:
    """Ground-truth bypass: the first ``c_h`` observation coordinates are the motion code."""

    def __init__(self, c_h: int = 2):
        self.c_h = c_h

    @property
    def c_f(self) -> int:
        return self.c_h

    def encode(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return x[:, self.c_h:], x[:, : self.c_h]


def appearance_motion_ratio(model, sequences) -> float:
    """Mean temporal variance of b over that of h across sequences."""
    vb = vh = 0.0
    for s in sequences:
        b, h = model.encode(s.obs)
        vb += float(np.sum(np.var(b, axis=0)))
        vh += float(np.sum(np.var(h, axis=0)))
    return vb / vh


def swap_vs_plain(model, sequences, seed: int = 0) -> tuple[float, float]:
    """Mean swap-reconstruction and plain-reconstruction errors over random pairs."""
    rng = np.random.default_rng([seed, 13])
    obs = np.stack([s.obs for s in sequences])
    n, T, _ = obs.shape
    i, j = _sample_pairs(rng, n, T)
    xi, xj = obs[np.arange(n), i], obs[np.arange(n), j]
    bi, _ = model.encode(xi)
    bj, hj = model.encode(xj)
    swap = np.linalg.norm(model.decode(bi, hj) - xj, axis=1)
    plain = np.linalg.norm(model.decode(bj, hj) - xj, axis=1)
    return float(swap.mean()), float(plain.mean())


def save_model(model: DisentangleModel, path, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(d_in=model.d_in, c_b=model.c_b, c_h=model.c_h)
    checkpoint.save(path, model.sections(), meta)


def load_model(path, width: int = 64) -> tuple[DisentangleModel, dict]:
    raw = Path(path)
    if not raw.exists():
        raise FileNotFoundError(f"missing artifact: {raw}")
    _, meta = checkpoint.loads(raw.read_bytes())
    model = DisentangleModel(meta["d_in"], meta["c_b"], meta["c_h"], width=width)
    checkpoint.load(path, model.sections())
    return model, meta
