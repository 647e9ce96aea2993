"""Pipeline glue: features, retrieved examples, method dispatch and evaluation protocols."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, dynamics, evaluation as ev, predictor, retrieval
from .autodiff import checkpoint
from .config import ExperimentConfig
from .disentangle import (DisentangleModel, PositionFeatures, load_model, save_model,
                          train_disentangle)


# ---------------------------------------------------------------- features

def make_encoder(cfg: ExperimentConfig, ds: dynamics.Dataset, log=None):
    fc = cfg.features
    if fc.kind == "position":
        return PositionFeatures(fc.c_h)
    d_in = ds.sequences[0].obs.shape[1]
    model = DisentangleModel(d_in, fc.c_b, fc.c_h, seed=fc.seed)
    train_disentangle(model, ds.train, epochs=fc.epochs, lr=fc.lr, batch=fc.batch,
                      seed=fc.seed, log=log)
    return model


def save_encoder(encoder, path, meta: dict):
    if isinstance(encoder, PositionFeatures):
        checkpoint.save(path, {}, {**meta, "kind": "position", "c_h": encoder.c_h})
    else:
        save_model(encoder, path, {**meta, "kind": "learned"})


def load_encoder(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing artifact: {p}")
    _, meta = checkpoint.loads(p.read_bytes())
    if meta.get("kind") == "position":
        return PositionFeatures(meta["c_h"]), meta
    return load_model(p)


def feature_array(encoder, seqs) -> np.ndarray:
    """Motion features (n, T, C), time-major."""
    return np.stack([encoder.encode(s.obs)[1] for s in seqs])


def index_over(F: np.ndarray, ids, M: int, use_diff: bool) -> retrieval.FeatureIndex:
    return retrieval.FeatureIndex(np.asarray(ids), np.swapaxes(F, 1, 2), M, use_diff)


def examples_for(F: np.ndarray, ids, index: retrieval.FeatureIndex, K: int,
                 random_seed: int | None = None) -> np.ndarray:
    """Retrieved example features (n, K, T, C); query ids are excluded from their own pools."""
    E = retrieval.retrieve_all(np.swapaxes(F, 1, 2), ids, index, K, exclude_self=True,
                               random_seed=random_seed)
    return np.swapaxes(E, 2, 3)


@dataclass
class Split:
    ids: np.ndarray
    F: np.ndarray          # (n, T, C)
    E: np.ndarray          # (n, K, T, C)
    labels: np.ndarray
    anchors: np.ndarray    # last context observation, (n, d_obs)


@dataclass
class Prepared:
    M: int
    H: int
    train: Split
    test: Split
    index: retrieval.FeatureIndex
    timing: dict = field(default_factory=dict)


def _split(seqs, F, E, M) -> Split:
    return Split(np.array([s.id for s in seqs]), F, E, np.array([s.mode_label for s in seqs]),
                 np.stack([s.obs[M - 1] for s in seqs]))


def prepare(cfg: ExperimentConfig, ds: dynamics.Dataset, encoder, index=None) -> Prepared:
    """Features and examples for both splits; the index covers the training split unless given."""
    spec, rc = ds.spec, cfg.retrieval
    tr, te = ds.train, ds.test
    Ftr, Fte = feature_array(encoder, tr), feature_array(encoder, te)
    if index is None:
        index = index_over(Ftr, [s.id for s in tr], spec.M, rc.use_diff)
    rs = cfg.data.seed if rc.random else None
    t0 = time.perf_counter()
    Etr = examples_for(Ftr, [s.id for s in tr], index, rc.K, rs)
    Ete = examples_for(Fte, [s.id for s in te], index, rc.K, rs)
    t2 = time.perf_counter()
    timing = {"retrieval_ms_per_query": 1e3 * (t2 - t0) / (len(tr) + len(te))}
    return Prepared(spec.M, spec.H, _split(tr, Ftr, Etr, spec.M), _split(te, Fte, Ete, spec.M),
                    index, timing)


# ---------------------------------------------------------------- methods

def new_model(method: str, c_f: int, T: int, tc: predictor.TrainConfig):
    if method == "vpeg":
        return predictor.VPEGNets(c_f, T, tc.h_z, tc.hidden, tc.seed)
    return baselines.BaselineNets(method, c_f, T, tc.h_z, tc.hidden, tc.seed)


def fit(method: str, nets, split: Split, tc: predictor.TrainConfig, M: int, log=None):
    if method == "vpeg":
        return predictor.train(nets, split.F, split.E, tc, M, log)
    if method == "fixed_prior":
        return baselines.train_fixed_prior(nets, split.F, tc, M, log)
    if method == "example_kl":
        return baselines.train_example_kl(nets, split.F, split.E, tc, M, log)
    raise ValueError(f"unknown method {method!r}")


def sample(method: str, nets, F_ctx, E, N: int, H: int, seed: int,
           first_step_noise: bool = False) -> np.ndarray:
    """Sampled futures (B, N, H, C)."""
    if method == "vpeg":
        return predictor.predict(nets, F_ctx, E, N, H, seed=seed, first_step_noise=first_step_noise)
    return baselines.predict(nets, F_ctx, N, H, seed=seed, first_step_noise=first_step_noise)


def save_trained(method: str, nets, path, meta: dict):
    (predictor.save_nets if method == "vpeg" else baselines.save_nets)(nets, path, meta)


def load_trained(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing artifact: {p}")
    _, meta = checkpoint.loads(p.read_bytes())
    if meta.get("kind") == "vpeg":
        nets, meta = predictor.load_nets(p)
        return "vpeg", nets, meta
    nets, meta = baselines.load_nets(p)
    return meta["kind"], nets, meta


def train_method(cfg: ExperimentConfig, prep: Prepared, method: str | None = None, log=None):
    method = method or cfg.method
    tc = cfg.train
    nets = new_model(method, prep.train.F.shape[2], prep.M + prep.H, tc)
    history = fit(method, nets, prep.train, tc, prep.M, log)
    return nets, history


# ---------------------------------------------------------------- evaluation

def evaluate(cfg: ExperimentConfig, prep: Prepared, method: str, nets, split: Split | None = None,
             config_hash: str = "") -> tuple[ev.EvalReport, dict]:
    """Standard report on ``split`` (default: test) plus wall-clock timings."""
    s = split if split is not None else prep.test
    ec, M, H = cfg.eval, prep.M, prep.H
    t0 = time.perf_counter()
    P = sample(method, nets, s.F[:, :M], s.E, ec.samples, H, ec.seed, cfg.train.first_step_noise)
    dt = time.perf_counter() - t0
    truth = s.F[:, M:]
    P_list = [p for p in ec.P_list if p <= ec.samples]
    extra = {
        "per_step_mean": [float(x) for x in ev.per_step_error(P, truth, "mean")],
        "n_cases": int(len(s.F)),
        "samples": int(ec.samples),
    }
    cov = None
    if cfg.data.kind == "action_modes" and cfg.features.kind == "position":
        reach = [dynamics.reachable_modes(int(m), cfg.data.n_modes) for m in s.labels]
        n = cfg.train.N
        cov = ev.mode_coverage(P[:, :n], s.anchors, reach, M, H, cfg.data.n_modes, ec.margin)
        extra[f"mode_coverage_at_{ec.samples}"] = ev.mode_coverage(
            P, s.anchors, reach, M, H, cfg.data.n_modes, ec.margin)
        extra["mode_consistency"] = ev.mode_consistency(P, s.anchors, s.labels, M, H,
                                                        cfg.data.n_modes, ec.margin)
    report = ev.EvalReport(
        method=method,
        per_step=ev.per_step_error(P, truth, "best_of"),
        best_of_p=ev.best_of_p_curve(P, truth, P_list, ec.trials, ec.seed),
        mode_coverage=cov,
        variance_match=ev.variance_match(P, s.E[:, :, M:]) if ec.samples >= 2 else None,
        config_hash=config_hash,
        seed=int(cfg.train.seed),
        extra=extra,
    )
    timing = {"predict_ms_per_case": 1e3 * dt / len(s.F), **prep.timing}
    return report, timing


def unseen_class_split(cfg: ExperimentConfig, ds: dynamics.Dataset, encoder) -> tuple[Split, retrieval.FeatureIndex]:
    """Held-out-mode test cases, each guided by other held-out-mode sequences."""
    held = set(cfg.data.held_out_modes)
    if not held:
        raise ValueError("unseen-class evaluation needs at least one held-out mode")
    if any(s.mode_label in held for s in ds.train):
        raise ValueError("held-out mode present in the training split")
    seqs = [s for s in ds.test if s.mode_label in held]
    if len(seqs) <= cfg.retrieval.K:
        raise ValueError("too few held-out sequences for retrieval with self-exclusion")
    F = feature_array(encoder, seqs)
    index = index_over(F, [s.id for s in seqs], ds.spec.M, cfg.retrieval.use_diff)
    E = examples_for(F, [s.id for s in seqs], index, cfg.retrieval.K)
    return _split(seqs, F, E, ds.spec.M), index


def unseen_class_eval(cfg: ExperimentConfig, ds, encoder, prep: Prepared, method: str, nets,
                      config_hash: str = ""):
    split, _ = unseen_class_split(cfg, ds, encoder)
    return evaluate(cfg, prep, method, nets, split, config_hash)


def k_sweep(cfg: ExperimentConfig, ds, encoder, Ks=range(2, 8), log=None) -> list[ev.EvalReport]:
    """Retrain and evaluate the configured method once per example count K."""
    reports = []
    for K in Ks:
        c = cfg.with_overrides(**{"retrieval.K": int(K)})
        prep = prepare(c, ds, encoder)
        nets, _ = train_method(c, prep, log=log)
        rep, _ = evaluate(c, prep, c.method, nets, config_hash=c.stage_hash("eval"))
        rep.extra["K"] = int(K)
        reports.append(rep)
    return reports
