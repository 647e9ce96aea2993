"""Synthetic multi-modal trajectory datasets.

Three generators:

* ``det_bounce``   point in the unit box, constant speed, specular walls.
* ``stoch_bounce`` as above, but every wall hit draws a fresh inward heading
  and speed.
* ``action_modes`` parametric templates; modes sharing a context template are
  indistinguishable until the prediction horizon starts.

Each sequence draws from its own RNG stream keyed by ``(seed, id)`` so any
subset can be regenerated independently.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("det_bounce", "stoch_bounce", "action_modes")
SPEED_RANGE = (0.05, 0.15)
ACTION_NOISE = 0.01
ACTION_AMPLITUDE = (0.15, 0.25)
NOMINAL_AMPLITUDE = 0.2
SWAY = 0.01
# context template shared by each mode; modes with equal entries are only
# distinguishable after the context ends
CONTEXT_GROUP = (0, 0, 1, 2)
MAX_MODES = len(CONTEXT_GROUP)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "det_bounce"
    count: int = 2200
    n_test: int = 200
    M: int = 5
    H: int = 10
    d_obs: int = 2
    nuisance_dims: int = 0
    seed: int = 0
    held_out_modes: tuple = ()
    n_modes: int = 2

    @property
    def T(self) -> int:
        return self.M + self.H

    def validate(self, K: int = 1):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.count < K + 1:
            raise ValueError(f"count={self.count} too small for K={K} with self-exclusion")
        if self.M < 1 or self.H < 0:
            raise ValueError("need M >= 1 and H >= 0")
        if self.nuisance_dims < 0:
            raise ValueError("nuisance_dims must be >= 0")
        if self.kind == "action_modes":
            if self.n_modes < 2:
                raise ValueError("action_modes needs at least 2 modes")
            if self.n_modes > MAX_MODES:
                raise ValueError(f"action_modes supports at most {MAX_MODES} modes")
            if self.d_obs != 2:
                raise ValueError("action_modes is defined for d_obs=2")
            bad = [m for m in self.held_out_modes if not 0 <= m < self.n_modes]
            if bad:
                raise ValueError(f"held-out modes {bad} outside 0..{self.n_modes - 1}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["held_out_modes"] = list(self.held_out_modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["held_out_modes"] = tuple(d.get("held_out_modes", ()))
        return cls(**d)


@dataclass
class Sequence:
    id: int
    obs: np.ndarray
    mode_label: int = 0
    split: str = "train"
    # latent ground truth (velocities for bounce data); not serialized
    state: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Dataset:
    spec: DatasetSpec
    sequences: list

    def split(self, name: str) -> list:
        return [s for s in self.sequences if s.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")

    def by_id(self) -> dict:
        return {s.id: s for s in self.sequences}


def seq_rng(seed: int, idx: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(idx), *extra])


# ---------------------------------------------------------------- bouncing

def reflect(p: np.ndarray, v: np.ndarray, lo: float = 0.0, hi: float = 1.0):
    """Fold ``p`` back into ``[lo, hi]`` flipping ``v`` once per wall crossed.

    Returns the new position, velocity and a per-axis wall-hit mask.
    """
    p, v = p.copy(), v.copy()
    hit = np.zeros(p.shape, dtype=bool)
    for _ in range(8):
        over, under = p > hi, p < lo
        if not (over.any() or under.any()):
            break
        p = np.where(over, 2 * hi - p, np.where(under, 2 * lo - p, p))
        v = np.where(over | under, -v, v)
        hit |= over | under
    return p, v, hit


def bounce_step(p: np.ndarray, v: np.ndarray):
    return reflect(p + v, v)


def _random_velocity(rng: np.random.Generator, d: int) -> np.ndarray:
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    return rng.uniform(*SPEED_RANGE) * u


def _inward_velocity(rng: np.random.Generator, v: np.ndarray, hit: np.ndarray) -> np.ndarray:
    # after reflect() v already points inward along every hit axis; a fresh
    # heading is drawn uniformly from that half-space (quadrant at corners)
    while True:
        u = rng.normal(size=v.shape[0])
        if np.all(np.sign(u[hit]) == np.sign(v[hit])) and np.all(u[hit] != 0):
            break
    u /= np.linalg.norm(u)
    return rng.uniform(*SPEED_RANGE) * u


def _bounce_sequence(spec: DatasetSpec, idx: int, stochastic: bool) -> Sequence:
    rng = seq_rng(spec.seed, idx)
    d = spec.d_obs
    p = rng.uniform(0.0, 1.0, size=d)
    v = _random_velocity(rng, d)
    obs = np.empty((spec.T, d))
    vel = np.empty((spec.T, d))
    obs[0], vel[0] = p, v
    for t in range(1, spec.T):
        p, v, hit = bounce_step(p, v)
        if stochastic and hit.any():
            v = _inward_velocity(rng, v, hit)
        obs[t], vel[t] = p, v
    return Sequence(idx, obs, 0, _split_for(spec, idx, 0), vel)


def _split_for(spec: DatasetSpec, idx: int, mode: int) -> str:
    if mode in spec.held_out_modes or idx >= spec.count - spec.n_test:
        return "test"
    return "train"


def gen_det_bounce(spec: DatasetSpec) -> Dataset:
    if spec.kind != "det_bounce":
        raise ValueError(f"gen_det_bounce got kind {spec.kind!r}")
    spec.validate()
    return _finish(spec, [_bounce_sequence(spec, i, False) for i in range(spec.count)])


def gen_stoch_bounce(spec: DatasetSpec) -> Dataset:
    if spec.kind != "stoch_bounce":
        raise ValueError(f"gen_stoch_bounce got kind {spec.kind!r}")
    spec.validate()
    return _finish(spec, [_bounce_sequence(spec, i, True) for i in range(spec.count)])


# ---------------------------------------------------------------- action modes

def _progress(M: int, H: int, T: int) -> np.ndarray:
    # 0 at the last context frame, 1 at the end of the horizon
    return (np.arange(T) - (M - 1)) / max(H, 1)


def mode_curve(mode: int, M: int, H: int, x0: float, y0: float, amp: float) -> np.ndarray:
    """Noise-free template for ``mode`` over all ``M + H`` frames (T x 2)."""
    T = M + H
    s = _progress(M, H, T)
    c = np.minimum(s, 0.0) * H        # frames before the anchor, <= 0
    f = np.maximum(s, 0.0)          # horizon progress, >= 0
    x = np.full(T, x0)
    y = np.full(T, y0)
    if mode == 0:
        x = x0 + amp * f
    elif mode == 1:
        x = x0 - amp * f
    elif mode == 2:
        x = x0 + 0.02 * c + amp * np.sin(np.pi * f)
        y = y0 + amp * f
    elif mode == 3:
        y = y0 - 0.02 * c + amp * f
        x = x0 - amp * np.sin(np.pi * f)
    else:
        raise ValueError(f"no template for mode {mode}")
    return np.stack([x, y], axis=1)


def reachable_modes(mode: int, n_modes: int) -> tuple:
    """Modes whose context template matches that of ``mode``."""
    g = CONTEXT_GROUP[mode]
    return tuple(m for m in range(n_modes) if CONTEXT_GROUP[m] == g)


def mode_templates(anchor: np.ndarray, M: int, H: int, n_modes: int) -> np.ndarray:
    """Future templates (n_modes x H x 2) anchored at the last context frame."""
    x0, y0 = float(anchor[0]), float(anchor[1])
    return np.stack([mode_curve(m, M, H, x0, y0, NOMINAL_AMPLITUDE)[M:] for m in range(n_modes)])


def gen_action_modes(spec: DatasetSpec) -> Dataset:
    if spec.kind != "action_modes":
        raise ValueError(f"gen_action_modes got kind {spec.kind!r}")
    spec.validate()
    seqs = []
    for i in range(spec.count):
        rng = seq_rng(spec.seed, i)
        mode = int(rng.integers(spec.n_modes))
        x0, y0 = rng.uniform(0.35, 0.65, size=2)
        amp = rng.uniform(*ACTION_AMPLITUDE)
        psi = rng.uniform(0, 2 * np.pi)
        obs = mode_curve(mode, spec.M, spec.H, x0, y0, amp)
        obs[:, 1] += SWAY * np.sin(0.9 * np.arange(spec.T) + psi)
        obs += rng.normal(scale=ACTION_NOISE, size=obs.shape)
        seqs.append(Sequence(i, obs, mode, _split_for(spec, i, mode),
                             np.array([x0, y0, amp, psi])))
    return _finish(spec, seqs)


# ---------------------------------------------------------------- common

def attach_nuisance(seq: Sequence, dims: int, seed: int) -> Sequence:
    """Append ``dims`` per-sequence constant coordinates drawn from U[-1, 1]."""
    if dims < 0:
        raise ValueError("dims must be >= 0")
    if dims == 0:
        return seq
    vals = seq_rng(seed, seq.id, 7).uniform(-1.0, 1.0, size=dims)
    obs = np.concatenate([seq.obs, np.broadcast_to(vals, (seq.obs.shape[0], dims))], axis=1)
    return Sequence(seq.id, obs, seq.mode_label, seq.split, seq.state)


def _finish(spec: DatasetSpec, seqs: list) -> Dataset:
    if spec.nuisance_dims:
        seqs = [attach_nuisance(s, spec.nuisance_dims, spec.seed) for s in seqs]
    return Dataset(spec, seqs)


GENERATORS = {
    "det_bounce": gen_det_bounce,
    "stoch_bounce": gen_stoch_bounce,
    "action_modes": gen_action_modes,
}


def generate(spec: DatasetSpec) -> Dataset:
    try:
        return GENERATORS[spec.kind](spec)
    except KeyError:
        raise ValueError(f"unknown generator kind {spec.kind!r}") from None


def classify_template(future: np.ndarray, templates: np.ndarray, margin: float | None = None) -> int:
    """Index of the nearest template by RMS distance, or -1 when ambiguous.

    With ``margin`` set, a label is only returned if the nearest template is at
    least ``1/margin`` times closer than the runner-up.
    """
    d = np.sqrt(np.mean((templates - future[None]) ** 2, axis=(1, 2)))
    order = np.argsort(d, kind="stable")
    best = int(order[0])
    if margin is not None and len(d) > 1 and d[best] > margin * d[order[1]]:
        return -1
    return best


# ---------------------------------------------------------------- file format

def dumps(ds: Dataset, meta: dict | None = None) -> str:
    header = {"spec": ds.spec.to_dict()}
    if meta:
        header.update(meta)
    lines = [json.dumps(header, sort_keys=True)]
    for s in ds.sequences:
        lines.append(json.dumps({
            "id": s.id, "mode": s.mode_label, "split": s.split,
            "obs": s.obs.reshape(-1).tolist(), "dims": list(s.obs.shape),
        }))
    return "\n".join(lines) + "\n"


def save(ds: Dataset, path, meta: dict | None = None) -> None:
    Path(path).write_text(dumps(ds, meta))


def load(path) -> tuple[Dataset, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    spec = DatasetSpec.from_dict(header["spec"])
    seqs = []
    for line in lines[1:]:
        r = json.loads(line)
        obs = np.asarray(r["obs"], dtype=np.float64).reshape(r["dims"])
        seqs.append(Sequence(r["id"], obs, r["mode"], r["split"]))
    return Dataset(spec, seqs), header
