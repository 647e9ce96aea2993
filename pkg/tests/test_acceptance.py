"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The comparative criteria train full-size models; trained nets are shared
through session fixtures so each configuration is fit once.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from exguide import autodiff as ad
from exguide import baselines as bl
from exguide import cli, config, disentangle as ds, dynamics as dy
from exguide import experiments as ex
from exguide import predictor as pr
from exguide import retrieval as rt
from exguide.autodiff.gradcheck import check_grads

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1. gradients

def _op_cases(rng):
    a = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    w = a(3, 5)
    return {
        "matmul": (lambda p: ad.sq_norm(ad.matmul(p[0], p[1])), [a(3, 4), a(4, 2)]),
        "add": (lambda p: ad.sq_norm(ad.add(p[0], p[1])), [a(3, 4), a(4)]),
        "sub": (lambda p: ad.sq_norm(ad.sub(p[0], p[1])), [a(3, 4), a(3, 4)]),
        "mul": (lambda p: ad.sq_norm(ad.mul(p[0], p[1])), [a(3, 4), a(3, 4)]),
        "div": (lambda p: ad.sum_(ad.div(p[0], p[1])), [a(3, 4), pos(3, 4)]),
        "tanh": (lambda p: ad.sq_norm(ad.tanh(p[0])), [a(3, 4)]),
        "relu": (lambda p: ad.sq_norm(ad.relu(p[0])), [np.sign(a(3, 4)) * pos(3, 4)]),
        "sigmoid": (lambda p: ad.sq_norm(ad.sigmoid(p[0])), [a(3, 4)]),
        "exp": (lambda p: ad.sum_(ad.exp(p[0])), [a(3, 4)]),
        "log": (lambda p: ad.sum_(ad.log(p[0])), [pos(3, 4)]),
        "square": (lambda p: ad.sum_(ad.square(p[0])), [a(3)]),
        "mean_axis": (lambda p: ad.sq_norm(ad.mean_axis(p[0], axis=1)), [a(3, 2, 4)]),
        "var_axis": (lambda p: ad.sq_norm(ad.var_axis(p[0], axis=1)), [a(3, 5, 2)]),
        "sum": (lambda p: ad.sq_norm(ad.sum_(p[0], axis=0)), [a(3, 2, 4)]),
        "concat": (lambda p: ad.sq_norm(ad.mul(ad.concat([p[0], p[1]], axis=1), w)),
                   [a(3, 2), a(3, 3)]),
        "slice": (lambda p: ad.sq_norm(p[0][:, 1:3]), [a(3, 4)]),
        "reshape": (lambda p: ad.sq_norm(ad.reshape(p[0], (6, 2))), [a(3, 4)]),
    }


def _loss_cases(rng):
    N, B, C = 4, 3, 2
    truth = rng.normal(size=(B, C))
    v = rng.uniform(0.1, 1, size=(B, C))
    d = rng.normal(size=(6, 1))
    d = np.where(np.abs(np.abs(d) - 1) < 0.05, d + 0.2, d)  # off the hinge kinks
    model = ds.DisentangleModel(4, 2, 2, width=6, seed=int(rng.integers(1 << 30)))
    obs = rng.normal(size=(5, 4))

    return {
        "swap": (lambda p: ds.swap_loss_batch(model, p[0], p[1]), [obs[:2], obs[2:4]]),
        "kl": (lambda p: bl.kl_gaussian(*p),
               [rng.normal(size=3), rng.uniform(0.2, 2, size=3),
                rng.normal(size=3), rng.uniform(0.2, 2, size=3)]),
        "rcn": (lambda p: pr.loss_rcn(p[0], truth, N), [rng.normal(size=(N * B, C))]),
        "dst": (lambda p: pr.loss_dst(p[0], v, N), [rng.normal(size=(N * B, C))]),
        "hinge_d": (lambda p: pr.disc_loss(p[0], p[1]), [d, -d[::-1]]),
        "hinge_g": (lambda p: pr.gen_loss(p[0]), [d]),
    }


def _fd_params(loss_fn, sections, n_entries, rng, h=1e-5):
    """Relative error of backward() vs central differences on random parameter entries."""
    for ps in sections:
        for _, p in ps:
            p.grad = np.zeros_like(p.value)  # drop gradients left by earlier passes
    ad.backward(loss_fn())
    pool = [p for ps in sections for _, p in ps]
    worst = 0.0
    for _ in range(n_entries):
        p = pool[rng.integers(len(pool))]
        i = int(rng.integers(p.value.size))
        g = p.grad.flat[i]
        orig = p.value.flat[i]
        vals = []
        for s in (h, -h):
            p.value.flat[i] = orig + s
            vals.append(float(loss_fn().value))
        p.value.flat[i] = orig
        num = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, abs(num - g) / max(abs(num), abs(g), 1e-6))
    return worst


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst, cases = {}, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for kind, (build, arrays) in {**_op_cases(rng), **_loss_cases(rng)}.items():
            worst[kind] = max(worst.get(kind, 0.0), check_grads(build, arrays))
            cases += 1
    # total objective through the rollout, on parameters of every network
    F = np.cumsum(np.random.default_rng(0).normal(scale=0.1, size=(2, 6, 2)), axis=1)
    E = F[:, None] + np.random.default_rng(1).normal(scale=0.05, size=(2, 3, 6, 2))
    cfg = pr.TrainConfig(K=3, N=3, lam_dst=0.1, lam_g=0.5)
    nets = pr.VPEGNets(2, 6, hidden=8)
    rng = np.random.default_rng(2)
    worst["total"] = _fd_params(lambda: pr.vpeg_losses(nets, F, E, cfg, 3, seed=0)[0],
                                [nets.pre.params, nets.qz.params], 100, rng)
    fake = pr.vpeg_losses(nets, F, E, cfg, 3, seed=0)[-1].value
    worst["disc_net"] = _fd_params(lambda: pr.disc_loss(nets.dcm(F), nets.dcm(fake)),
                                   [nets.dcm.params], 50, rng)
    cases += 150
    elapsed = time.perf_counter() - t0
    bad = max(worst.values())
    record(1, bad < 1e-4 and cases >= 100 and elapsed < 60,
           f"max rel err {bad:.2e} over {cases} cases and {len(worst)} ops/losses in {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. retrieval oracle

def _brute(q, index, K, exclude):
    key = rt.retrieval_key(q, index.M, index.use_diff)
    rows = sorted((float(np.sum((index.keys[r] - key) ** 2)), int(i))
                  for r, i in enumerate(index.ids) if i != exclude)
    return [i for _, i in rows[:K]]


def test_criterion_02_retrieval_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n, C, T, M = 2000, 2, 15, 5
    # a coarse grid on half of the entries makes exact ties frequent
    full = rng.normal(size=(n, C, T))
    full[: n // 2] = np.round(full[: n // 2])
    ids = rng.permutation(10 * n)[:n]
    mismatches, ties, excluded = 0, 0, 0
    for use_diff in (False, True):
        index = rt.FeatureIndex(ids, full, M, use_diff)
        for q in range(250):
            r = int(rng.integers(n))
            exclude = int(ids[r]) if q % 2 == 0 else None
            K = int(rng.integers(1, 11))
            es = rt.retrieve(full[r], index, K, exclude_id=exclude)
            mismatches += es.omega != _brute(full[r], index, K, exclude)
            ties += len(set(es.distances)) < len(es.distances)
            excluded += exclude is not None and exclude not in es.omega
    elapsed = time.perf_counter() - t0
    record(2, mismatches == 0 and ties > 0 and elapsed < 60,
           f"{mismatches} mismatches in 500 queries ({ties} with ties, {excluded} self-excluded) in {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. loss identities

def test_criterion_03_loss_identities():
    worst_rcn = worst_kl = worst_kl_grad = 0.0
    dst_zero = True
    for seed in range(200):
        rng = np.random.default_rng(seed)
        N, B, C = 5, 3, 2
        P = rng.normal(size=(N, B, C))
        truth = rng.normal(size=(B, C))
        oracle = np.mean([min(np.sum((P[i, b] - truth[b]) ** 2) for i in range(N)) for b in range(B)])
        worst_rcn = max(worst_rcn, abs(pr.loss_rcn(P.reshape(N * B, C), truth, N).value - oracle))
        ex_set = rng.normal(size=(N, B, C))
        _, ex_var = pr.example_stats(ex_set, axis=0)
        dst_zero &= pr.loss_dst(ex_set.reshape(N * B, C), ex_var, N).value == 0.0
        d = int(rng.integers(1, 7))
        mu, var = rng.normal(size=d), rng.uniform(0.1, 3.0, size=d)
        nodes = [ad.param(x) for x in (mu, var, mu, var)]
        kl = bl.kl_gaussian(*nodes)
        ad.backward(kl)
        worst_kl = max(worst_kl, abs(kl.value - 0.5 * d))
        worst_kl_grad = max(worst_kl_grad, max(np.max(np.abs(n.grad)) for n in nodes))
    ok = worst_rcn < 1e-12 and dst_zero and worst_kl < 1e-12 and worst_kl_grad < 1e-12
    record(3, ok, f"rcn vs oracle {worst_rcn:.1e}, dst zero at N=K: {dst_zero}, "
                  f"kl-½dim {worst_kl:.1e}, kl grad {worst_kl_grad:.1e}")


# ---------------------------------------------------------------- 10. disentangler

def test_criterion_10_disentangler():
    data = dy.generate(dy.DatasetSpec(kind="det_bounce", count=2200, n_test=200, nuisance_dims=4))
    model = ds.DisentangleModel(6, 4, 2)
    curve = ds.train_disentangle(model, data.train, epochs=50, lr=2e-3)
    ratio = ds.appearance_motion_ratio(model, data.test)
    swap, plain = ds.swap_vs_plain(model, data.test)
    record(10, ratio < 0.01 and swap <= 2 * plain,
           f"b/h variance ratio {ratio:.1e}; swap {swap:.4f} vs plain {plain:.4f} "
           f"(ratio {swap / plain:.2f}); final swap loss {curve[-1]:.1e}")


# ---------------------------------------------------------------- 11. determinism

TINY = """\
[run]
method = vpeg

[data]
kind = stoch_bounce
count = 60
n_test = 10

[features]
kind = learned
epochs = 3

[retrieval]
K = 3

[train]
K = 3
N = 3
epochs = 2
hidden = 16

[eval]
samples = 4
P_list = 1, 2, 4
"""


def test_criterion_11_determinism(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY.replace("[data]\n", "[data]\nnuisance_dims = 2\n"))
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["run", "--config", str(p), "--out", str(out)]) == 0
        assert cli.main(["train", "--config", str(p), "--out", str(out), "--method", "fixed_prior"]) == 0
        assert cli.main(["eval", "--config", str(p), "--out", str(out), "--method", "fixed_prior"]) == 0
        names = ["dataset.jsonl", "encoder.ckpt", "index.json", "vpeg.ckpt", "vpeg_log.csv",
                 "eval_vpeg.json", "fixed_prior_log.csv", "eval_fixed_prior.json"]
        blobs.append({n: (out / n).read_bytes() for n in names})
    same = [n for n in blobs[0] if blobs[0][n] == blobs[1][n]]
    record(11, len(same) == len(blobs[0]),
           f"{len(same)}/{len(blobs[0])} artifacts byte-identical across two runs")


# ---------------------------------------------------------------- shared training

_CACHE: dict = {}


def _over_key(over: dict):
    return tuple(sorted(over.items()))


def setup(name: str, **over):
    key = ("setup", name, _over_key(over))
    if key not in _CACHE:
        cfg = config.load(CONFIGS / f"{name}.ini")
        cfg = (cfg.with_overrides(**over) if over else cfg).validate()
        data = dy.generate(cfg.data)
        enc = ex.make_encoder(cfg, data)
        _CACHE[key] = (cfg, data, enc, ex.prepare(cfg, data, enc))
    return _CACHE[key]


def trained(name: str, method: str, **over):
    """(cfg, prep, nets, report, train_seconds) for one method on one config."""
    key = ("trained", name, method, _over_key(over))
    if key not in _CACHE:
        cfg, _, _, prep = setup(name, **over)
        c = cfg.with_overrides(method=method)
        t0 = time.perf_counter()
        nets, _ = ex.train_method(c, prep)
        secs = time.perf_counter() - t0
        rep, _ = ex.evaluate(c, prep, method, nets)
        _CACHE[key] = (c, prep, nets, rep, secs)
    return _CACHE[key]


def mean_best(rep) -> float:
    return float(np.mean(rep.per_step))


# ---------------------------------------------------------------- 4. deterministic motion

def test_criterion_04_deterministic_motion():
    _, prep, _, rep, secs = trained("det_bounce", "vpeg")
    # N=1 regression reference: same network and budget, every auxiliary loss off
    ref_over = {"train.N": 1, "train.lam_dst": 0.0, "train.lam_d": 0.0, "train.lam_g": 0.0}
    _, _, _, ref, ref_secs = trained("det_bounce", "vpeg", **ref_over)
    n_train, n_test = len(prep.train.ids), len(prep.test.ids)
    v, r = rep.per_step[9], ref.per_step[9]
    ok = (v < 1e-3 and v <= 1.1 * r and secs < 600 and (n_train, n_test) == (2000, 200)
          and (prep.M, prep.H) == (5, 10))
    record(4, ok, f"VPEG t=10 best-of-20 MSE {v:.3e} vs N=1 reference {r:.3e} (ratio {v / r:.3f}); "
                  f"train {secs:.0f}s (reference {ref_secs:.0f}s)")


# ---------------------------------------------------------------- 5. stochastic motion

SEEDS = (0, 1, 2)


def _stoch_pair(seed):
    over = {"train.seed": seed}
    return trained("stoch_bounce", "vpeg", **over), trained("stoch_bounce", "fixed_prior", **over)


def test_criterion_05_stochastic_motion():
    rows, wins = [], 0
    for seed in SEEDS:
        (_, _, _, v, vs), (_, _, _, b, bs) = _stoch_pair(seed)
        steps = all(v.per_step[t - 1] < b.per_step[t - 1] for t in (1, 5, 10))
        curve = [v.best_of_p[p] for p in sorted(v.best_of_p)]
        mono = all(x >= y for x, y in zip(curve, curve[1:]))
        below = all(v.best_of_p[p] <= b.best_of_p[p] for p in (1, 5, 20))
        ok = steps and mono and below and max(vs, bs) < 1200
        wins += ok
        rows.append(
            f"seed {seed} {'ok' if ok else 'no'}: t1/5/10 "
            + "/".join(f"{v.per_step[t - 1]:.2e}<{b.per_step[t - 1]:.2e}" for t in (1, 5, 10))
            + " P1/5/20 " + "/".join(f"{v.best_of_p[p]:.2e}<={b.best_of_p[p]:.2e}" for p in (1, 5, 20)))
    record(5, wins >= 2, f"{wins}/3 seeds satisfy; " + "; ".join(rows))


# ---------------------------------------------------------------- 6. mode coverage

def test_criterion_06_mode_coverage():
    cfg, _, _, v, _ = trained("action_modes", "vpeg")
    _, _, _, b, _ = trained("action_modes", "fixed_prior")
    assert cfg.train.N == cfg.retrieval.K == 5 and cfg.data.n_modes == 2
    ok = v.mode_coverage >= 0.9 and v.mode_coverage >= b.mode_coverage + 0.2
    record(6, ok, f"coverage with N=K=5 samples: VPEG {v.mode_coverage:.3f}, "
                  f"fixed prior {b.mode_coverage:.3f} (needs >= 0.9 and >= baseline + 0.2)")


# ---------------------------------------------------------------- 7. K ablation

def test_criterion_07_k_ablation():
    errs = {}
    for K in range(2, 8):
        rep = trained("stoch_bounce", "vpeg", **{"train.seed": 0, "retrieval.K": K})[3]
        errs[K] = mean_best(rep)
    ok = errs[5] <= errs[2] and errs[5] <= errs[7]
    record(7, ok, "mean best-of-20 error by K: " + ", ".join(f"K={k} {e:.3e}" for k, e in errs.items()))


# ---------------------------------------------------------------- 8. random examples

def test_criterion_08_random_examples():
    base = mean_best(trained("stoch_bounce", "vpeg", **{"train.seed": 0})[3])
    rand = mean_best(trained("stoch_bounce", "vpeg", **{"train.seed": 0, "retrieval.random": True})[3])
    rel = rand / base - 1
    record(8, rel >= 0.2, f"mean best-of-20 error retrieved {base:.3e}, random {rand:.3e} "
                          f"(+{100 * rel:.0f}%, needs >= +20%)")


# ---------------------------------------------------------------- 9. unseen class

def test_criterion_09_unseen_class():
    scores = {}
    for method in ("vpeg", "fixed_prior"):
        c, prep, nets, _, _ = trained("unseen_modes", method)
        _, data, enc, _ = setup("unseen_modes")
        rep, _ = ex.unseen_class_eval(c, data, enc, prep, method, nets)
        scores[method] = rep.extra["mode_consistency"]
    ok = scores["vpeg"] > scores["fixed_prior"]
    record(9, ok, f"held-out mode consistency: VPEG {scores['vpeg']:.3f}, "
                  f"fixed prior {scores['fixed_prior']:.3f}")
