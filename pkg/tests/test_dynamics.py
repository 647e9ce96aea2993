import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from exguide import dynamics as dy


def spec(**kw):
    base = dict(kind="det_bounce", count=200, n_test=20)
    base.update(kw)
    return dy.DatasetSpec(**base)


def test_validation_errors():
    with pytest.raises(ValueError, match="unknown generator"):
        spec(kind="spiral").validate()
    with pytest.raises(ValueError, match="too small"):
        spec(count=5).validate(K=5)
    with pytest.raises(ValueError, match="held-out"):
        spec(kind="action_modes", held_out_modes=(7,)).validate()
    with pytest.raises(ValueError):
        dy.generate(spec(kind="action_modes", n_modes=1))


def test_det_bounce_in_box_and_speed_conserved():
    ds = dy.generate(spec())
    for s in ds.sequences:
        assert s.obs.min() >= 0.0 and s.obs.max() <= 1.0
        speed = np.linalg.norm(s.state, axis=1)
        np.testing.assert_allclose(speed, speed[0], rtol=0, atol=1e-15)


def test_det_bounce_time_reversible():
    ds = dy.generate(spec(count=50, n_test=5))
    for s in ds.sequences:
        p, v = s.obs[-1].copy(), -s.state[-1]
        back = [p]
        for _ in range(len(s.obs) - 1):
            p, v, _ = dy.bounce_step(p, v)
            back.append(p)
        np.testing.assert_allclose(np.array(back[::-1]), s.obs, atol=1e-12)


def test_initial_speed_uniform():
    ds = dy.generate(spec(count=2000, n_test=0))
    speeds = np.array([np.linalg.norm(s.state[0]) for s in ds.sequences])
    lo, hi = dy.SPEED_RANGE
    assert stats.kstest(speeds, "uniform", args=(lo, hi - lo)).pvalue > 0.01


def test_stoch_bounce_piecewise_constant_velocity():
    ds = dy.generate(spec(kind="stoch_bounce", count=100))
    changes = 0
    for s in ds.sequences:
        for t in range(1, len(s.obs)):
            step_in = s.obs[t] - s.obs[t - 1]
            if np.allclose(s.state[t], s.state[t - 1]):
                # no wall between t-1 and t: the displacement equals the velocity
                np.testing.assert_allclose(step_in, s.state[t], atol=1e-12)
            else:
                changes += 1
                lo, hi = dy.SPEED_RANGE
                assert lo <= np.linalg.norm(s.state[t]) <= hi
    assert changes > 0


def test_inward_heading_uniform_over_half_circle():
    # a hit on the right wall: fresh headings point left, angle uniform over (pi/2, 3pi/2)
    v = np.array([-0.1, 0.0])
    hit = np.array([True, False])
    ang = []
    for i in range(3000):
        u = dy._inward_velocity(np.random.default_rng([5, i]), v, hit)
        assert u[0] < 0
        ang.append(np.arctan2(u[1], u[0]) % (2 * np.pi))
    ang = np.array(ang)
    assert stats.kstest(ang, "uniform", args=(np.pi / 2, np.pi)).pvalue > 0.01
    # far from Gaussian: a uniform spread has negative excess kurtosis
    assert stats.kurtosis(ang) < -1.0


def test_stoch_future_multimodal_near_wall():
    # one context just before a corner hit; resampled futures split across headings
    p = np.array([0.97, 0.5])
    v = np.array([0.1, 0.0])
    ends = []
    for i in range(400):
        rng = np.random.default_rng([11, i])
        q, w, hit = dy.bounce_step(p, v)
        w = dy._inward_velocity(rng, w, hit)
        for _ in range(4):
            q, w, _ = dy.bounce_step(q, w)
        ends.append(q[1])
    ends = np.array(ends)
    # mass on both sides of the start height, little at the center
    assert (ends < 0.4).mean() > 0.2 and (ends > 0.6).mean() > 0.2


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_generation_bit_identical(seed):
    a = dy.generate(spec(kind="stoch_bounce", count=30, n_test=5, seed=seed))
    b = dy.generate(spec(kind="stoch_bounce", count=30, n_test=5, seed=seed))
    assert dy.dumps(a) == dy.dumps(b)


def test_sequences_independent_of_count():
    a = dy.generate(spec(count=40, n_test=5))
    b = dy.generate(spec(count=80, n_test=5))
    for s, t in zip(a.sequences, b.sequences):
        np.testing.assert_array_equal(s.obs, t.obs)


def test_split_sizes():
    ds = dy.generate(spec(count=120, n_test=20))
    assert len(ds.test) == 20 and len(ds.train) == 100
    assert all(s.id >= 100 for s in ds.test)


def test_save_load_roundtrip(tmp_path):
    ds = dy.generate(spec(kind="action_modes", count=40, n_test=5, nuisance_dims=2))
    p = tmp_path / "d.jsonl"
    dy.save(ds, p, {"config_hash": "abc"})
    back, meta = dy.load(p)
    assert meta["config_hash"] == "abc"
    assert back.spec == ds.spec
    for s, t in zip(ds.sequences, back.sequences):
        np.testing.assert_array_equal(s.obs, t.obs)
        assert (s.id, s.mode_label, s.split) == (t.id, t.mode_label, t.split)


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing artifact"):
        dy.load(tmp_path / "nope.jsonl")


def test_nuisance_constant_per_sequence():
    ds = dy.generate(spec(count=30, n_test=3, nuisance_dims=4))
    for s in ds.sequences:
        assert s.obs.shape[1] == 6
        assert np.all(s.obs[:, 2:] == s.obs[0, 2:])
        assert np.all(np.abs(s.obs[0, 2:]) <= 1.0)


# ---------------------------------------------------------------- action modes

def test_mode_templates_share_context_within_group():
    M, H = 5, 10
    c0 = dy.mode_curve(0, M, H, 0.5, 0.5, 0.2)
    c1 = dy.mode_curve(1, M, H, 0.5, 0.5, 0.2)
    c2 = dy.mode_curve(2, M, H, 0.5, 0.5, 0.2)
    np.testing.assert_array_equal(c0[:M], c1[:M])
    assert not np.allclose(c0[M:], c1[M:])
    assert not np.allclose(c0[:M], c2[:M])
    assert dy.reachable_modes(0, 4) == (0, 1)
    assert dy.reachable_modes(3, 4) == (3,)


def test_ground_truth_futures_classify_to_own_mode():
    ds = dy.generate(spec(kind="action_modes", count=400, n_test=0, n_modes=4))
    M, H = ds.spec.M, ds.spec.H
    hits = 0
    for s in ds.sequences:
        tpl = dy.mode_templates(s.obs[M - 1], M, H, 4)
        hits += dy.classify_template(s.obs[M:], tpl, margin=0.7) == s.mode_label
    assert hits == len(ds.sequences)


def test_classify_rejects_midpoint():
    tpl = np.stack([np.zeros((3, 2)), np.ones((3, 2))])
    assert dy.classify_template(np.full((3, 2), 0.5), tpl, margin=0.7) == -1
    assert dy.classify_template(np.full((3, 2), 0.1), tpl, margin=0.7) == 0


def test_held_out_modes_in_test_split():
    ds = dy.generate(spec(kind="action_modes", count=200, n_test=20, n_modes=4, held_out_modes=(3,)))
    assert all(s.mode_label != 3 for s in ds.train)
    assert any(s.mode_label == 3 for s in ds.test)
