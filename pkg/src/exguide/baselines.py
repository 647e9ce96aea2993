"""Variational baselines sharing the guided predictor's recurrent core.

``fixed_prior``  posterior sees ground truth during training and is pulled
                 toward N(0, I); test-time noise comes from N(0, I).
``example_kl``   noise is drawn from a distribution over the predicted
                 history and pulled toward one built from the examples.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import checkpoint
from .predictor import (
    PredictorNet, PriorNet, TrainConfig, TrainingError, EpochLog, guide_inputs, plateau_epoch,
    rng_streams, _tile, _sum,
)

CAPACITY_FIELDS = ("hidden", "h_z", "lr_pred", "final_lr_frac", "epochs", "batch", "seed", "clip")


def capacity_hash(cfg: TrainConfig) -> str:
    """Hash of everything a fair comparison must hold fixed across methods."""
    d = {k: getattr(cfg, k) for k in CAPACITY_FIELDS}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def kl_gaussian(mu, var, mu_hat, var_hat) -> ad.Node:
    """Divergence of N(mu_hat, var_hat) from the target N(mu, var), summed.

    Equals the standard Gaussian KL plus 1/2 per dimension, so it is exactly
    1/2 * dim with zero gradient when the two distributions coincide.
    Arguments are variances, not standard deviations.
    """
    mu, var, mu_hat, var_hat = (ad.as_node(x) for x in (mu, var, mu_hat, var_hat))
    if np.any(var.value <= 0) or np.any(var_hat.value <= 0):
        raise ValueError("kl_gaussian needs strictly positive variances")
    log_term = ad.mul(ad.sub(ad.log(var), ad.log(var_hat)), 0.5)
    d = ad.sub(mu, mu_hat)
    quad = ad.div(ad.add(var_hat, ad.square(d)), ad.mul(var, 2.0))
    return ad.sum_(ad.add(log_term, quad))


def _kl_logvar(mu, logvar, mu_hat, logvar_hat) -> ad.Node:
    """kl_gaussian on log-variance inputs, without forming the log of an exp."""
    var, var_hat = ad.exp(logvar), ad.exp(logvar_hat)
    log_term = ad.mul(ad.sub(logvar, logvar_hat), 0.5)
    d = ad.sub(mu, mu_hat)
    quad = ad.div(ad.add(var_hat, ad.square(d)), ad.mul(var, 2.0))
    return ad.sum_(ad.add(log_term, quad))


class PosteriorNet:
    def __init__(self, n_in: int, h_z: int, rng, width: int = 64, name: str = "pz"):
        self.params = ad.ParamSet(name)
        self.h_z = h_z
        self.mlp = ad.MLP(self.params, "mlp", [n_in, width, width, 2 * h_z], rng, out_scale=0.1)

    def __call__(self, x) -> tuple[ad.Node, ad.Node]:
        out = self.mlp(x)
        return out[:, : self.h_z], out[:, self.h_z:]


@dataclass
class BaselineNets:
    kind: str
    c_f: int
    T: int
    h_z: int = 4
    hidden: int = 128
    seed: int = 0
    pre: PredictorNet = field(init=False)
    pz: PosteriorNet = field(init=False)
    qz: PriorNet | None = field(init=False)

    def __post_init__(self):
        if self.kind not in ("fixed_prior", "example_kl"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        rng = np.random.default_rng([self.seed, 41])
        self.pre = PredictorNet(self.c_f, self.h_z, rng, hidden=self.hidden, guided=False)
        if self.kind == "fixed_prior":
            # previous and target ground-truth frames
            self.pz = PosteriorNet(2 * self.c_f, self.h_z, rng)
            self.qz = None
        else:
            # predictor hidden state summarizes the predicted history
            self.pz = PosteriorNet(self.hidden, self.h_z, rng)
            self.qz = PriorNet(self.c_f, self.h_z, rng)

    def sections(self) -> dict:
        s = {"pre": self.pre.params, "pz": self.pz.params}
        if self.qz is not None:
            s["qz"] = self.qz.params
        return s


def _context(nets: BaselineNets, ctx: np.ndarray, M: int):
    B = ctx.shape[0]
    h = nets.pre.cell.init_state(B)
    z0 = np.zeros((B, nets.h_z))
    for t in range(M - 1):
        _, h = nets.pre.step(h, ctx[:, t], z0, prev=ctx[:, t - 1] if t > 0 else None)
    return h


def baseline_losses(nets: BaselineNets, F: np.ndarray, M: int, stats, seed: int, key=(),
                    lam_kl: float = 1.0):
    """Per-step reconstruction plus ``lam_kl`` * KL, averaged over the prediction steps."""
    B, T, C = F.shape
    H = T - M
    h = _context(nets, F, M)
    f = ad.constant(F[:, M - 1])
    prev = F[:, M - 2] if M >= 2 else None
    eps_rng = rng_streams(seed, 1, *key)[0]
    rec, kls = [], []
    qz_mu = qz_lv = None
    if nets.kind == "example_kl":
        mean, std, _ = stats
        qz_mu, qz_lv = nets.qz(mean.reshape(B * T, C), std.reshape(B * T, C))
        qz_mu = ad.reshape(qz_mu, (B, T, nets.h_z))
        qz_lv = ad.reshape(qz_lv, (B, T, nets.h_z))
    for t in range(M - 1, T - 1):
        eps = eps_rng.standard_normal((B, nets.h_z))
        if nets.kind == "fixed_prior":
            mu_hat, lv_hat = nets.pz(np.concatenate([F[:, t], F[:, t + 1]], axis=1))
            kl = _kl_logvar(np.zeros((B, nets.h_z)), np.zeros((B, nets.h_z)), mu_hat, lv_hat)
        else:
            mu_hat, lv_hat = nets.pz(h)
            kl = _kl_logvar(qz_mu[:, t], qz_lv[:, t], mu_hat, lv_hat)
        z = ad.add(mu_hat, ad.mul(ad.exp(ad.mul(lv_hat, 0.5)), eps))
        f_next, h = nets.pre.step(h, f, z, prev=prev)
        f, prev = f_next, f
        rec.append(ad.mul(ad.sq_norm(ad.sub(f, F[:, t + 1])), 1.0 / B))
        kls.append(ad.mul(kl, 1.0 / B))
    L_rec = ad.mul(_sum(rec), 1.0 / H)
    L_kl = ad.mul(_sum(kls), 1.0 / H)
    return ad.add(L_rec, ad.mul(L_kl, lam_kl)), L_rec, L_kl


def _train(nets: BaselineNets, F, examples, cfg: TrainConfig, M: int, log=None) -> EpochLog:
    F = np.asarray(F, dtype=np.float64)
    n, T, C = F.shape
    stats_all = guide_inputs(examples[:, :, :T]) if examples is not None else None
    history = EpochLog()
    for ep in range(cfg.epochs):
        lr = cfg.lr_pred * cfg.final_lr_frac ** (ep / max(cfg.epochs - 1, 1))
        order = np.random.default_rng([cfg.seed, 31, ep]).permutation(n)
        sums, nb = np.zeros(2), 0
        for bi, k in enumerate(range(0, n, cfg.batch)):
            idx = order[k:k + cfg.batch]
            stats = tuple(s[idx] for s in stats_all) if stats_all is not None else None
            total, L_rec, L_kl = baseline_losses(nets, F[idx], M, stats, cfg.seed, key=(ep, bi),
                                                 lam_kl=cfg.lam_kl)
            if not np.isfinite(total.value):
                raise TrainingError(f"non-finite {nets.kind} loss at epoch {ep}, batch {bi}")
            ad.backward(total)
            for ps in nets.sections().values():
                ad.optimizer_step(ps, lr, clip=cfg.clip)
            sums += [float(L_rec.value), float(L_kl.value)]
            nb += 1
        rec, kl = sums / nb
        row = dict(epoch=ep, L_rcn=rec, L_dst=0.0, L_D=0.0, L_G=0.0, L_KL=kl, L_fin=rec + cfg.lam_kl * kl)
        history.append(row)
        if log:
            log(f"{nets.kind} epoch {ep}: L_rec={rec:.4g} L_KL={kl:.4g}")
    history.plateau_epoch = plateau_epoch([r["L_fin"] for r in history])
    return history


def train_fixed_prior(nets: BaselineNets, F, cfg: TrainConfig, M: int, log=None) -> EpochLog:
    if nets.kind != "fixed_prior":
        raise ValueError("train_fixed_prior needs fixed_prior nets")
    return _train(nets, F, None, cfg, M, log)


def train_example_kl(nets: BaselineNets, F, examples, cfg: TrainConfig, M: int, log=None) -> EpochLog:
    if nets.kind != "example_kl":
        raise ValueError("train_example_kl needs example_kl nets")
    return _train(nets, F, examples, cfg, M, log)


def rollout(nets: BaselineNets, context: np.ndarray, N: int, H: int, seed: int = 0, key=(),
            first_step_noise: bool = False) -> np.ndarray:
    """Sampled futures (B, N, H, C); fixed_prior draws test noise from N(0, I)."""
    context = np.asarray(context, dtype=np.float64)
    B, _, C = context.shape
    M = context.shape[1]
    if H == 0:
        return np.zeros((B, N, 0, C))
    h = _tile(_context(nets, context, M), N)
    f = ad.constant(np.tile(context[:, M - 1], (N, 1)))
    prev = np.tile(context[:, M - 2], (N, 1)) if M >= 2 else None
    streams = rng_streams(seed, N, *key)
    preds, eps = [], None
    for _ in range(H):
        if eps is None or not first_step_noise:
            eps = np.concatenate([g.standard_normal((B, nets.h_z)) for g in streams], axis=0)
        if nets.kind == "fixed_prior":
            z = eps
        else:
            mu_hat, lv_hat = nets.pz(h)
            z = ad.add(mu_hat, ad.mul(ad.exp(ad.mul(lv_hat, 0.5)), eps))
        f_next, h = nets.pre.step(h, f, z, prev=prev)
        f, prev = f_next, f
        preds.append(f.value)
    P = np.stack(preds, axis=1).reshape(N, B, H, C)
    return np.swapaxes(P, 0, 1)


def predict(nets: BaselineNets, F_ctx, N: int, H: int, seed: int = 0, key=(),
            first_step_noise: bool = False, batch: int = 256) -> np.ndarray:
    out = [rollout(nets, F_ctx[k:k + batch], N, H, seed, (*key, k), first_step_noise)
           for k in range(0, len(F_ctx), batch)]
    return np.concatenate(out, axis=0)


def save_nets(nets: BaselineNets, path, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(kind=nets.kind, c_f=nets.c_f, T=nets.T, h_z=nets.h_z, hidden=nets.hidden)
    checkpoint.save(path, nets.sections(), meta)


def load_nets(path) -> tuple[BaselineNets, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing artifact: {p}")
    _, meta = checkpoint.loads(p.read_bytes())
    nets = BaselineNets(meta["kind"], meta["c_f"], meta["T"], meta["h_z"], meta["hidden"])
    checkpoint.load(p, nets.sections())
    return nets, meta
