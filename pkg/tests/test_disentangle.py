import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exguide import autodiff as ad
from exguide import disentangle as ds
from exguide import dynamics as dy


@pytest.fixture(scope="module")
def trained():
    data = dy.generate(dy.DatasetSpec(kind="det_bounce", count=2200, n_test=200, nuisance_dims=4))
    model = ds.DisentangleModel(6, 4, 2)
    curve = ds.train_disentangle(model, data.train, epochs=50, lr=2e-3)
    return model, curve, data


def test_encode_deterministic_and_bounded():
    m = ds.DisentangleModel(6, 4, 2)
    x = np.random.default_rng(0).uniform(-2, 2, size=(50, 6))
    b, h = m.encode(x)
    b2, h2 = m.encode(x)
    np.testing.assert_array_equal(b, b2)
    np.testing.assert_array_equal(h, h2)
    assert b.shape == (50, 4) and h.shape == (50, 2)
    assert np.all(np.isfinite(b)) and np.all(np.isfinite(h))


def test_code_too_large():
    with pytest.raises(ValueError):
        ds.DisentangleModel(3, 2, 2)


def test_swap_loss_errors_and_nonnegative():
    m = ds.DisentangleModel(4, 2, 2)
    obs = np.random.default_rng(1).normal(size=(5, 4))
    with pytest.raises(ValueError):
        ds.swap_loss(m, obs, 2, 2)
    with pytest.raises(IndexError):
        ds.swap_loss(m, obs, 0, 5)
    assert ds.swap_loss(m, obs, 0, 3).value >= 0


def test_swap_loss_definition():
    m = ds.DisentangleModel(4, 2, 2)
    obs = np.random.default_rng(2).normal(size=(5, 4))
    b1, _ = m.encode(obs[1])
    _, h3 = m.encode(obs[3])
    want = np.sum((m.decode(b1, h3) - obs[3]) ** 2)
    assert abs(ds.swap_loss(m, obs, 1, 3).value - want) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_swap_loss_gradient_fd(seed):
    m = ds.DisentangleModel(4, 2, 2, width=8, seed=seed)
    obs = np.random.default_rng(seed).normal(size=(6, 4))
    ad.backward(ds.swap_loss(m, obs, 1, 4))
    for ps in m.sections().values():
        for name, p in list(ps)[:3]:
            g = p.grad.flat[0]
            orig = p.value.flat[0]
            vals = []
            for s in (1e-6, -1e-6):
                p.value.flat[0] = orig + s
                vals.append(ds.swap_loss(m, obs, 1, 4).value)
            p.value.flat[0] = orig
            num = (vals[0] - vals[1]) / 2e-6
            assert abs(num - g) <= 1e-4 * max(abs(num), 1e-6), name


def test_pairs_uniform_offdiagonal():
    rng = np.random.default_rng(0)
    i, j = ds._sample_pairs(rng, 60_000, 4)
    assert np.all(i != j)
    counts = np.zeros((4, 4))
    np.add.at(counts, (i, j), 1)
    off = counts[~np.eye(4, dtype=bool)]
    assert off.min() / off.max() > 0.9


def test_zero_epochs_unchanged():
    data = dy.generate(dy.DatasetSpec(kind="det_bounce", count=20, n_test=2, nuisance_dims=2))
    m = ds.DisentangleModel(4, 2, 2)
    before = {n: p.value.copy() for n, p in m.enc_params}
    assert ds.train_disentangle(m, data.train, epochs=0) == []
    for n, p in m.enc_params:
        np.testing.assert_array_equal(p.value, before[n])


def test_empty_dataset():
    with pytest.raises(ValueError):
        ds.train_disentangle(ds.DisentangleModel(4, 2, 2), [], epochs=1)


def test_divergence_aborts():
    data = dy.generate(dy.DatasetSpec(kind="det_bounce", count=20, n_test=2, nuisance_dims=2))
    for s in data.train:
        s.obs = s.obs * 1e3
    with pytest.raises(ds.DivergenceError):
        ds.train_disentangle(ds.DisentangleModel(4, 2, 2), data.train, epochs=1)


def test_constant_sequence_learnable():
    seq = dy.Sequence(0, np.tile([0.3, -0.2, 0.5], (6, 1)), None)
    m = ds.DisentangleModel(3, 1, 1, width=16)
    curve = ds.train_disentangle(m, [seq] * 8, epochs=300, lr=1e-2, batch=8)
    assert curve[-1] < 1e-4


@given(st.integers(1, 6))
@settings(max_examples=6, deadline=None)
def test_extract_matches_encode(T):
    m = ds.DisentangleModel(4, 2, 2)
    obs = np.random.default_rng(T).normal(size=(T, 4))
    F = ds.extract_features(m, obs)
    assert F.features.shape == (2, T)
    np.testing.assert_array_equal(F.features, m.encode(obs)[1].T)
    for t in range(T):
        # one-row matmul may round differently from the batched one
        np.testing.assert_allclose(F.features[:, t], m.encode(obs[t])[1][0], rtol=0, atol=1e-14)


def test_position_bypass():
    x = np.array([[0.1, 0.2, 9.0]])
    b, h = ds.PositionFeatures(2).encode(x)
    np.testing.assert_array_equal(h, [[0.1, 0.2]])
    np.testing.assert_array_equal(b, [[9.0]])


def test_save_load(tmp_path, trained):
    model, _, data = trained
    ds.save_model(model, tmp_path / "d.ckpt", {"config_hash": "h"})
    back, meta = ds.load_model(tmp_path / "d.ckpt")
    assert meta["config_hash"] == "h"
    np.testing.assert_array_equal(back.encode(data.test[0].obs)[1], model.encode(data.test[0].obs)[1])
    with pytest.raises(FileNotFoundError, match="missing artifact"):
        ds.load_model(tmp_path / "x.ckpt")


# ------------------------------------------------------------ trained checkpoint

def test_trained_swap_loss_small(trained):
    _, curve, _ = trained
    assert curve[-1] < 1e-3


def test_trained_appearance_constant(trained):
    model, _, data = trained
    assert ds.appearance_motion_ratio(model, data.test) < 0.01
    for s in data.test[:20]:
        b, _ = model.encode(s.obs)
        assert np.sqrt(np.mean((b[0] - b[-1]) ** 2)) < 0.05


def test_trained_swap_within_twice_plain(trained):
    model, _, data = trained
    swap, plain = ds.swap_vs_plain(model, data.test)
    assert swap <= 2 * plain


def test_trained_motion_ignores_nuisance(trained):
    model, _, data = trained
    rng = np.random.default_rng(4)
    diffs = []
    for s in data.test[:100]:
        x = s.obs.copy()
        x[:, 2:] += rng.normal(scale=0.1, size=4)  # 10% of the nuisance range
        diffs.append(model.encode(x)[1] - model.encode(s.obs)[1])
    assert np.sqrt(np.mean(np.square(diffs))) < 0.05


def test_trained_motion_tracks_position(trained):
    # h is an invertible function of position: a linear map explains most of it
    model, _, data = trained
    X = np.concatenate([s.obs[:, :2] for s in data.test])
    Hm = np.concatenate([model.encode(s.obs)[1] for s in data.test])
    A = np.c_[X, np.ones(len(X))]
    coef, *_ = np.linalg.lstsq(A, Hm, rcond=None)
    r2 = 1 - np.sum((A @ coef - Hm) ** 2) / np.sum((Hm - Hm.mean(0)) ** 2)
    assert r2 > 0.8
