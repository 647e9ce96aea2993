"""Example-guided stochastic prediction in motion-feature space.

N rollouts share one recurrent predictor and differ only in their noise.
Noise is drawn from a Gaussian whose parameters come from the retrieved
examples' per-step mean and spread; predicted states never feed the noise
model.  Training combines

* best-of-N reconstruction (only the closest sample at each step is pulled
  toward the truth),
* variance matching between the N samples and the K examples,
* hinge adversarial losses from a discriminator over differenced sequences.

Arrays are laid out time-major inside a sequence: features ``(B, T, C)``,
examples ``(B, K, T, C)``.  Rollout rows are sample-major: row ``i * B + b`` is
sample ``i`` of sequence ``b``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import checkpoint

LOG_FIELDS = ("epoch", "L_rcn", "L_dst", "L_D", "L_G", "L_fin")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    K: int = 5
    N: int = 5
    lam_rcn: float = 1.0
    lam_dst: float = 0.1
    lam_d: float = 0.01
    lam_g: float = 0.01
    lam_kl: float = 1.0  # baselines only
    lr_pred: float = 1e-3
    lr_disc: float = 1e-3
    final_lr_frac: float = 0.1
    epochs: int = 30
    batch: int = 64
    h_z: int = 4
    hidden: int = 128
    seed: int = 0
    clip: float = 1.0
    first_step_noise: bool = False

    def validate(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.N < 2 and self.lam_dst > 0:
            raise ValueError("variance matching needs N >= 2")
        if self.K < 2:
            raise ValueError("example statistics need K >= 2")
        if min(self.lam_rcn, self.lam_dst, self.lam_d, self.lam_g, self.lam_kl) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- statistics

def example_stats(examples: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise population mean and variance across the K examples."""
    examples = np.asarray(examples, dtype=np.float64)
    if examples.shape[axis] < 2:
        raise ValueError(f"example_stats needs K >= 2, got {examples.shape[axis]}")
    mean = examples.mean(axis=axis)
    var = ((examples - np.expand_dims(mean, axis)) ** 2).mean(axis=axis)
    return mean, var


def rng_streams(seed: int, n: int, *key: int) -> list[np.random.Generator]:
    return [np.random.default_rng([int(seed), *map(int, key), i]) for i in range(n)]


def sample_noise(mu, var, N: int, rng) -> np.ndarray:
    """N i.i.d. draws ``mu + sqrt(var) * eps``; ``var`` is the per-element variance."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("noise variance must be non-negative")
    gens = rng if isinstance(rng, (list, tuple)) else [rng] * N
    eps = np.stack([g.standard_normal(mu.shape) for g in gens[:N]])
    return mu[None] + np.sqrt(var)[None] * eps


# ---------------------------------------------------------------- networks

class PriorNet:
    """Example statistics -> (mu, log variance) of the noise."""

    def __init__(self, c_f: int, h_z: int, rng, width: int = 64, name: str = "qz"):
        self.params = ad.ParamSet(name)
        self.h_z = h_z
        self.mlp = ad.MLP(self.params, "mlp", [2 * c_f, width, width, 2 * h_z], rng, out_scale=0.1)

    def __call__(self, mean, std) -> tuple[ad.Node, ad.Node]:
        out = self.mlp(ad.concat([mean, std], axis=-1))
        return out[:, : self.h_z], out[:, self.h_z:]


class PredictorNet:
    """GRU over [state, scaled displacement, noise, example guide].

    The guide for the step into ``t + 1`` is the examples' mean displacement
    into ``t + 1``, the offset from the current state to their mean at
    ``t + 1`` (both scaled like the displacement) and their spread at ``t + 1``.
    The output extrapolates the last displacement and a ReLU head adds a
    correction, so constant motion is the zero-correction default.
    """

    def __init__(self, c_f: int, h_z: int, rng, hidden: int = 128, guided: bool = True,
                 name: str = "pre", head_width: int = 64, disp_scale: float = 10.0):
        self.params = ad.ParamSet(name)
        self.c_f, self.h_z, self.guided = c_f, h_z, guided
        self.disp_scale = disp_scale
        n_in = 2 * c_f + h_z + (3 * c_f if guided else 0)
        self.cell = ad.GRUCell(self.params, "gru", n_in, hidden, rng)
        self.head = ad.MLP(self.params, "head", [hidden, head_width, c_f], rng, act="relu",
                           out_scale=0.1)

    def step(self, h, f, z, guide=None, prev=None) -> tuple[ad.Node, ad.Node]:
        """One step from state ``f`` with predecessor ``prev`` (defaults to ``f``).

        ``guide`` is ``(mean_t, mean_next, std_next)`` of the examples.
        """
        f = ad.as_node(f)
        d = ad.sub(f, prev) if prev is not None else ad.constant(np.zeros(f.shape))
        parts = [f, ad.mul(d, self.disp_scale), z]
        if guide is not None:
            mean_t, mean_next, std_next = guide
            parts += [ad.constant(self.disp_scale * (mean_next - mean_t)),
                      ad.mul(ad.sub(mean_next, f), self.disp_scale), std_next]
        h = self.cell(ad.concat(parts, axis=1), h)
        return ad.add(ad.add(f, d), self.head(h)), h


class Discriminator:
    def __init__(self, c_f: int, T: int, rng, width: int = 64, name: str = "dcm"):
        self.params = ad.ParamSet(name)
        self.n_in = (T - 1) * c_f
        self.mlp = ad.MLP(self.params, "mlp", [self.n_in, width, width, 1], rng)

    def __call__(self, seq) -> ad.Node:
        """Scores (B, 1) for feature sequences (B, T, C)."""
        seq = ad.as_node(seq)
        B = seq.shape[0]
        d = ad.sub(seq[:, 1:], seq[:, :-1])
        return self.mlp(ad.reshape(d, (B, self.n_in)))


@dataclass
class VPEGNets:
    c_f: int
    T: int
    h_z: int = 4
    hidden: int = 128
    seed: int = 0
    qz: PriorNet = field(init=False)
    pre: PredictorNet = field(init=False)
    dcm: Discriminator = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 41])
        self.qz = PriorNet(self.c_f, self.h_z, rng)
        self.pre = PredictorNet(self.c_f, self.h_z, rng, hidden=self.hidden)
        self.dcm = Discriminator(self.c_f, self.T, rng)

    def sections(self) -> dict:
        return {"qz": self.qz.params, "pre": self.pre.params, "dcm": self.dcm.params}


# ---------------------------------------------------------------- rollout

def _tile(x, N: int):
    return x if N == 1 else ad.concat([x] * N, axis=0)


@dataclass
class Rollout:
    preds: list            # H nodes of shape (N*B, C), steps M+1..M+H
    noise_draws: int
    mu: ad.Node | None = None

    def values(self, N: int) -> np.ndarray:
        """Predictions as an (N, B, H, C) array."""
        if not self.preds:
            return np.zeros((N, 0, 0, 0))
        P = np.stack([p.value for p in self.preds], axis=1)  # (N*B, H, C)
        return P.reshape(N, -1, *P.shape[1:])


def guide_inputs(examples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, std, var) of examples (B, K, T, C) across K, each (B, T, C)."""
    mean, var = example_stats(examples, axis=1)
    return mean, np.sqrt(var), var


def rollout(nets: VPEGNets, context: np.ndarray, examples: np.ndarray, N: int, H: int,
            seed: int = 0, key=(), first_step_noise: bool = False,
            stats=None) -> Rollout:
    """Teacher-forced context phase, then H free-running steps for N samples.

    ``context`` is (B, >=M, C) with M = T - H of the examples' horizon;
    sample ``i`` draws noise from the stream ``(seed, *key, i)``.
    """
    context = np.asarray(context, dtype=np.float64)
    B, _, C = context.shape
    mean, std, _ = stats if stats is not None else guide_inputs(examples)
    T = mean.shape[1]
    M = T - H
    if M < 1 or context.shape[1] < M:
        raise ValueError(f"horizon mismatch: examples cover {T} steps, context {context.shape[1]}, H={H}")
    if not np.all(np.isfinite(context)):
        raise ValueError("non-finite context features")
    if H == 0:
        return Rollout([], 0)

    # noise parameters see example statistics only
    mu_all, logvar_all = nets.qz(mean.reshape(B * T, C), std.reshape(B * T, C))
    mu_all = ad.reshape(mu_all, (B, T, nets.h_z))
    sd_all = ad.exp(ad.mul(ad.reshape(logvar_all, (B, T, nets.h_z)), 0.5))

    h = nets.pre.cell.init_state(B)
    for t in range(M - 1):
        prev = context[:, t - 1] if t > 0 else None
        guide = (mean[:, t], mean[:, t + 1], std[:, t + 1])
        _, h = nets.pre.step(h, context[:, t], mu_all[:, t], guide, prev)

    streams = rng_streams(seed, N, *key)
    h = _tile(h, N)
    f = ad.constant(np.tile(context[:, M - 1], (N, 1)))
    prev = np.tile(context[:, M - 2], (N, 1)) if M >= 2 else None
    mean_t = np.tile(mean, (N, 1, 1))
    std_t = np.tile(std, (N, 1, 1))
    preds, draws, eps = [], 0, None
    for t in range(M - 1, T - 1):
        if eps is None or not first_step_noise:
            eps = np.concatenate([g.standard_normal((B, nets.h_z)) for g in streams], axis=0)
            draws += 1
        z = ad.add(_tile(mu_all[:, t], N), ad.mul(_tile(sd_all[:, t], N), eps))
        guide = (mean_t[:, t], mean_t[:, t + 1], std_t[:, t + 1])
        f_next, h = nets.pre.step(h, f, z, guide, prev)
        f, prev = f_next, f
        if not np.all(np.isfinite(f.value)):
            raise TrainingError(f"non-finite prediction at step {t + 1}")
        preds.append(f)
    return Rollout(preds, draws, mu_all)


# ---------------------------------------------------------------- losses

def best_index(preds: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sequence argmin over samples (N, B, C) vs (B, C); ties -> smallest i."""
    err = np.sum((preds - truth[None]) ** 2, axis=-1)
    return np.argmin(err, axis=0)


def loss_rcn(pred, truth, N: int) -> ad.Node:
    """Mean over sequences of the smallest squared error among the N samples.

    ``pred`` is an (N*B, C) node, ``truth`` (B, C).
    """
    pred = ad.as_node(pred)
    truth = np.asarray(truth, dtype=np.float64)
    B, C = truth.shape
    P = ad.reshape(pred, (N, B, C))
    err = ad.sum_(ad.square(ad.sub(P, truth[None])), axis=2)  # (N, B)
    j = np.argmin(err.value, axis=0)
    mask = np.zeros((N, B))
    mask[j, np.arange(B)] = 1.0
    return ad.mul(ad.sum_(ad.mul(err, mask)), 1.0 / B)


def loss_dst(pred, ex_var, N: int) -> ad.Node:
    """Mean over sequences of ||V(samples) - V(examples)||^2 (population variances)."""
    pred = ad.as_node(pred)
    ex_var = np.asarray(ex_var, dtype=np.float64)
    B, C = ex_var.shape
    if N < 2:
        raise ValueError("loss_dst needs N >= 2")
    v = ad.var_axis(ad.reshape(pred, (N, B, C)), axis=0)
    return ad.mul(ad.sq_norm(ad.sub(v, ex_var)), 1.0 / B)


def disc_loss(d_real, d_fake) -> ad.Node:
    """Hinge loss for the discriminator, averaged over the batch."""
    d_real, d_fake = ad.as_node(d_real), ad.as_node(d_fake)
    n = d_real.value.size
    hinge = ad.add(ad.relu(ad.sub(1.0, d_real)), ad.relu(ad.add(1.0, d_fake)))
    return ad.mul(ad.sum_(hinge), 0.5 / n)


def gen_loss(d_fake) -> ad.Node:
    d_fake = ad.as_node(d_fake)
    return ad.mul(ad.sum_(d_fake), -1.0 / d_fake.value.size)


def fake_sequence(context: np.ndarray, preds: list, i: int, B: int) -> ad.Node:
    """Ground-truth context followed by sample ``i``'s predictions, (B, T, C)."""
    C = context.shape[2]
    steps = [ad.reshape(p[i * B:(i + 1) * B], (B, 1, C)) for p in preds]
    return ad.concat([ad.constant(context)] + steps, axis=1)


# ---------------------------------------------------------------- training

@dataclass
class StepLosses:
    L_rcn: float
    L_dst: float
    L_D: float
    L_G: float

    def fin(self, cfg: TrainConfig) -> float:
        return (cfg.lam_rcn * self.L_rcn + cfg.lam_dst * self.L_dst
                + cfg.lam_d * self.L_D + cfg.lam_g * self.L_G)


def vpeg_losses(nets: VPEGNets, F: np.ndarray, examples: np.ndarray, cfg: TrainConfig,
                M: int, seed: int, key=(), fake_index: int = 0, stats=None):
    """Generator objective and the pieces needed for the discriminator step."""
    B, T, C = F.shape
    H = T - M
    stats = stats if stats is not None else guide_inputs(examples)
    ro = rollout(nets, F[:, :M], examples, cfg.N, H, seed=seed, key=key,
                 first_step_noise=cfg.first_step_noise, stats=stats)
    var = stats[2]
    rcn, dst = [], []
    for k, p in enumerate(ro.preds):
        t = M + k
        rcn.append(loss_rcn(p, F[:, t], cfg.N))
        if cfg.lam_dst > 0:
            dst.append(loss_dst(p, var[:, t], cfg.N))
    L_rcn = ad.mul(_sum(rcn), 1.0 / H)
    L_dst = ad.mul(_sum(dst), 1.0 / H) if dst else None
    total = ad.mul(L_rcn, cfg.lam_rcn)
    if L_dst is not None:
        total = ad.add(total, ad.mul(L_dst, cfg.lam_dst))
    fake = L_G = None
    if cfg.lam_g > 0 or cfg.lam_d > 0:
        fake = fake_sequence(F[:, :M], ro.preds, fake_index, B)
        if cfg.lam_g > 0:
            L_G = gen_loss(nets.dcm(fake))
            total = ad.add(total, ad.mul(L_G, cfg.lam_g))
    return total, L_rcn, L_dst, L_G, fake


def _sum(nodes):
    out = nodes[0]
    for n in nodes[1:]:
        out = ad.add(out, n)
    return out


def _val(node) -> float:
    return 0.0 if node is None else float(node.value)


class EpochLog(list):
    """Per-epoch rows of LOG_FIELDS plus plateau bookkeeping."""

    plateau_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in self:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
        return buf.getvalue()


def plateau_epoch(fin: list[float], window: int = 10, tol: float = 1e-4) -> int | None:
    """First epoch after which relative improvement over ``window`` epochs stays below ``tol``."""
    for e in range(window, len(fin)):
        prev, cur = fin[e - window], fin[e]
        if prev != 0 and (prev - cur) / abs(prev) < tol:
            return e
    return None


def _check(val: float, what: str, epoch: int, batch: int):
    if not np.isfinite(val):
        raise TrainingError(f"non-finite {what} at epoch {epoch}, batch {batch}")


def train(nets: VPEGNets, F: np.ndarray, examples: np.ndarray, cfg: TrainConfig, M: int,
          log=None) -> EpochLog:
    """Fit the guided predictor on features F (n, T, C) with examples (n, K, T, C)."""
    cfg.validate()
    F = np.asarray(F, dtype=np.float64)
    n, T, C = F.shape
    if examples.shape[0] != n or examples.shape[2] < T:
        raise ValueError("examples must be aligned with F and cover its horizon")
    stats_all = guide_inputs(examples[:, :, :T])
    use_disc = cfg.lam_d > 0 or cfg.lam_g > 0
    history = EpochLog()
    for ep in range(cfg.epochs):
        lr_scale = cfg.final_lr_frac ** (ep / max(cfg.epochs - 1, 1))
        order = np.random.default_rng([cfg.seed, 31, ep]).permutation(n)
        pick = np.random.default_rng([cfg.seed, 32, ep])
        sums = np.zeros(4)
        nb = 0
        for bi, k in enumerate(range(0, n, cfg.batch)):
            idx = order[k:k + cfg.batch]
            stats = tuple(s[idx] for s in stats_all)
            fake_i = int(pick.integers(cfg.N))
            total, L_rcn, L_dst, L_G, fake = vpeg_losses(
                nets, F[idx], examples[idx], cfg, M, cfg.seed, key=(ep, bi),
                fake_index=fake_i, stats=stats)
            _check(float(total.value), "generator loss", ep, bi)
            ad.backward(total)
            ad.optimizer_step(nets.pre.params, cfg.lr_pred * lr_scale, clip=cfg.clip)
            ad.optimizer_step(nets.qz.params, cfg.lr_pred * lr_scale, clip=cfg.clip)
            nets.dcm.params.zero_grad()
            L_D = None
            if use_disc:
                L_D = disc_loss(nets.dcm(F[idx]), nets.dcm(ad.detach(fake)))
                _check(float(L_D.value), "discriminator loss", ep, bi)
                if cfg.lam_d > 0:
                    ad.backward(ad.mul(L_D, cfg.lam_d))
                    ad.optimizer_step(nets.dcm.params, cfg.lr_disc * lr_scale, clip=cfg.clip)
            sums += [_val(L_rcn), _val(L_dst), _val(L_D), _val(L_G)]
            nb += 1
        sl = StepLosses(*(sums / nb))
        row = dict(epoch=ep, **asdict(sl), L_fin=sl.fin(cfg))
        history.append(row)
        if log:
            log(f"epoch {ep}: " + " ".join(f"{k}={row[k]:.4g}" for k in LOG_FIELDS[1:]))
    history.plateau_epoch = plateau_epoch([r["L_fin"] for r in history])
    return history


def predict(nets: VPEGNets, F_ctx: np.ndarray, examples: np.ndarray, N: int, H: int,
            seed: int = 0, key=(), first_step_noise: bool = False, batch: int = 256) -> np.ndarray:
    """Sampled futures (B, N, H, C) for contexts (B, >=M, C)."""
    out = []
    for k in range(0, len(F_ctx), batch):
        ro = rollout(nets, F_ctx[k:k + batch], examples[k:k + batch], N, H, seed=seed,
                     key=(*key, k), first_step_noise=first_step_noise)
        out.append(np.swapaxes(ro.values(N), 0, 1))
    return np.concatenate(out, axis=0)


def save_nets(nets: VPEGNets, path, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(kind="vpeg", c_f=nets.c_f, T=nets.T, h_z=nets.h_z, hidden=nets.hidden)
    checkpoint.save(path, nets.sections(), meta)


def load_nets(path) -> tuple[VPEGNets, dict]:
    from pathlib import Path
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing artifact: {p}")
    _, meta = checkpoint.loads(p.read_bytes())
    nets = VPEGNets(meta["c_f"], meta["T"], meta["h_z"], meta["hidden"])
    checkpoint.load(p, nets.sections())
    return nets, meta
