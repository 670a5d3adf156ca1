import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereocbf import errormodel as em
from stereocbf.geometry import CameraRig, RobotPose
from stereocbf.scene import INVALID, Plane, Scene, TextureSpec, render_triple

from oracles import numeric_grad, random_batch, rel_err


# -- features ---------------------------------------------------------------


def test_flat_image_features():
    flat = np.full((20, 30), 100, dtype=np.uint8)
    d = np.full((20, 30), 3, dtype=np.int32)
    f = em.feature_map(flat, flat, d)
    assert f.shape == (20, 30, em.N_FEATURES)
    assert np.all(f[..., 0] == 0) and np.all(f[..., 1] == 0)
    assert np.all(f[..., 5] == 1)


def test_checker_gradient_exceeds_flat():
    cols = (np.arange(30) // 1) % 2  # period 2 px
    checker = np.tile(np.where(cols, 200, 50), (20, 1)).astype(np.uint8)
    flat = np.full((20, 30), 100, dtype=np.uint8)
    d = np.zeros((20, 30), dtype=np.int32)
    p = (15, 10)
    assert em.extract_features(checker, checker, d, p)[0] > em.extract_features(flat, flat, d, p)[0]


def test_features_deterministic_and_finite(rng):
    a = rng.integers(0, 256, (25, 40)).astype(np.uint8)
    b = rng.integers(0, 256, (25, 40)).astype(np.uint8)
    d = rng.integers(-1, 10, (25, 40)).astype(np.int32)
    f1 = em.feature_map(a, b, d)
    assert np.array_equal(f1, em.feature_map(a, b, d))
    assert np.all(np.isfinite(f1))
    np.testing.assert_array_equal(em.extract_features(a, b, d, (7, 3)), f1[3, 7])
    # discrepancy is zero where the disparity is unusable
    assert np.all(f1[d == INVALID][:, 3] == 0)


def test_discrepancy_vanishes_on_exact_shift(rng):
    a = rng.integers(0, 256, (20, 60)).astype(np.uint8)
    b = np.zeros_like(a)
    b[:, :-4] = a[:, 4:]
    d = np.full(a.shape, 4, dtype=np.int32)
    f = em.feature_map(a, b, d)
    assert np.all(f[2:-2, 8:-6, 3] == 0)


def test_border_feature_caps():
    s = em.FeatureScales()
    img = np.zeros((60, 80), dtype=np.uint8)
    f = em.feature_map(img, img, np.zeros((60, 80), dtype=np.int32), s)
    assert f[0, 0, 4] == 0
    assert f[30, 40, 4] == s.border_cap / s.border


# -- prediction and loss ----------------------------------------------------


def test_predict_examples():
    x = np.ones(6)
    assert np.allclose(em.predict(em.ErrorModelParams.zeros(), x), 0.2)
    W = np.zeros((6, 5))
    W[-1, 2] = 1e4
    p = em.predict(em.ErrorModelParams(W), x)
    assert np.all(np.isfinite(p)) and p[2] == pytest.approx(1.0)
    W = np.zeros((6, 3))
    W[-1] = [0.0, math.log(2), math.log(2)]
    np.testing.assert_allclose(em.predict(em.ErrorModelParams(W), x), [0.2, 0.4, 0.4])
    with pytest.raises(ValueError):
        em.predict(em.ErrorModelParams.zeros(), np.ones(5))


def test_predict_sums_to_one(rng):
    W = rng.normal(scale=3.0, size=(6, 5))
    X = rng.normal(scale=5.0, size=(10_000, 6))
    P = em.predict(em.ErrorModelParams(W), X)
    assert np.all(P >= 0)
    assert np.max(np.abs(P.sum(axis=1) - 1)) <= 1e-9


def test_loss_examples(rng):
    b = random_batch(rng, n=30)
    assert em.loss(em.ErrorModelParams.zeros(), b) == pytest.approx(math.log(5), abs=1e-12)
    # one-hot predictions with logit magnitude 20
    X = np.zeros((5, 6))
    X[:, -1] = 1.0
    X[np.arange(5), np.arange(5)] = 1.0
    W = np.zeros((6, 5))
    W[np.arange(5), np.arange(5)] = 20.0
    assert em.loss(em.ErrorModelParams(W), em.Batch(X, np.arange(5), np.zeros(5, int), np.zeros(5, int))) <= 1e-6
    two = em.Batch(np.ones((2, 6)), np.array([0, 1]), np.zeros(2, int), np.zeros(2, int))
    assert em.loss(em.ErrorModelParams.zeros(6, 2), two) == pytest.approx(math.log(2))


def test_loss_counts_only_valid_pixels():
    I = np.full((10, 12), 80, dtype=np.uint8)
    d_hat = np.full((10, 12), INVALID, dtype=np.int32)
    d_bar = np.full((10, 12), INVALID, dtype=np.int32)
    d_hat[4, 5], d_bar[4, 5] = 3, 3
    d_hat[6, 7], d_bar[6, 7] = 6, 1  # error 5 -> top class
    b = em.make_batch(I, I, d_hat, d_bar)
    assert b.labels.tolist() == [0, 4]
    empty = np.full((10, 12), INVALID, dtype=np.int32)
    with pytest.raises(em.NoValidPixels):
        em.loss(em.ErrorModelParams.zeros(), em.make_batch(I, I, empty, d_bar))


def test_gradient_at_zero_matches_finite_differences(rng):
    b = random_batch(rng, n=20)
    W = np.zeros((6, 5))
    _, g = em.loss_and_grad(em.ErrorModelParams(W), b)
    assert rel_err(g, numeric_grad(W, b)) <= 1e-5


def test_gradient_random_instances(rng):
    for _ in range(20):
        b = random_batch(rng)
        W = rng.normal(scale=0.5, size=(6, 5))
        _, g = em.loss_and_grad(em.ErrorModelParams(W), b)
        assert rel_err(g, numeric_grad(W, b)) <= 1e-5


def test_sgd_step_zero_rate_is_identity(rng):
    b = random_batch(rng)
    p = em.ErrorModelParams(rng.normal(size=(6, 5)))
    assert np.array_equal(em.sgd_step(p, b, 0.0).weights, p.weights)
    with pytest.raises(ValueError):
        em.sgd_step(p, b, -1.0)


# -- online adaptation ------------------------------------------------------


@pytest.fixture(scope="module")
def plane_frame():
    rig = CameraRig()
    scene = Scene((Plane((1.0, 0, 0), (-1.0, 0, 0), TextureSpec("checker", period_m=0.03)),))
    tr, gt = render_triple(scene, RobotPose(), rig)
    return rig, tr, gt


@pytest.mark.parametrize("eta", [1e-4, 1e-3, 1e-2])
def test_loss_nonincreasing_on_exact_fixture(plane_frame, eta):
    rig, tr, gt = plane_frame
    p = em.ErrorModelParams.zeros()
    losses = []
    for _ in range(100):
        p, value = em.adapt_online(p, tr, None, eta, rig.d_max, maps=(gt.d12, gt.d23, gt.d13))
        losses.append(value)
    assert np.all(np.diff(losses) <= 1e-12)


def test_exact_frame_converges_to_class_zero(plane_frame):
    rig, tr, gt = plane_frame
    maps = (gt.d12, gt.d23, gt.d13)
    feats = em.feature_map(tr.I1, tr.I3, gt.d13)
    p = em.ErrorModelParams.zeros()
    for _ in range(200):
        p, _ = em.adapt_online(p, tr, None, 0.01, rig.d_max, maps=maps, features=feats)
    b = em.make_batch(tr.I1, tr.I3, gt.d13, gt.d13)
    assert em.predict(p, b.features)[:, 0].mean() >= 0.99


def test_adapt_online_uses_matcher(plane_frame):
    rig, tr, gt = plane_frame
    def matcher(a, b):
        if a is tr.I1 and b is tr.I2:
            return gt.d12
        if a is tr.I2:
            return gt.d23
        return gt.d13

    p1, l1 = em.adapt_online(em.ErrorModelParams.zeros(), tr, matcher, 0.01, rig.d_max)
    p2, l2 = em.adapt_online(em.ErrorModelParams.zeros(), tr, None, 0.01, rig.d_max,
                             maps=(gt.d12, gt.d23, gt.d13))
    assert l1 == l2 and np.array_equal(p1.weights, p2.weights)


def test_all_invalid_frame_is_a_no_op(plane_frame):
    rig, tr, _ = plane_frame
    bad = np.full(tr.I1.shape, INVALID, dtype=np.int32)
    p = em.ErrorModelParams(np.ones((6, 5)))
    p2, value = em.adapt_online(p, tr, None, 0.1, rig.d_max, maps=(bad, bad, bad))
    assert value is None and np.array_equal(p2.weights, p.weights)


def test_alternating_clean_and_noisy_frames_stay_bounded(plane_frame, rng):
    rig, tr, gt = plane_frame
    noisy = gt.d13 + rng.integers(0, 4, gt.d13.shape).astype(np.int32)
    clean_f = em.feature_map(tr.I1, tr.I3, gt.d13)
    noisy_f = em.feature_map(tr.I1, tr.I3, noisy)
    p = em.ErrorModelParams.zeros()
    losses = []
    for k in range(1000):
        maps = (gt.d12, gt.d23, gt.d13 if k % 2 == 0 else noisy)
        p, value = em.adapt_online(p, tr, None, 1e-3, rig.d_max, maps=maps,
                                   features=clean_f if k % 2 == 0 else noisy_f)
        losses.append(value)
    assert np.all(np.isfinite(losses)) and max(losses[500:]) < 2 * math.log(5)
    assert np.all(np.isfinite(p.weights))


# -- quantiles and uncertainty sets -----------------------------------------


def test_quantile_examples():
    assert em.quantile(np.array([0.95, 0.04, 0.01]), 0.99, 48) == 1
    assert em.quantile(np.array([0.5, 0.2, 0.2, 0.05, 0.05]), 1.0, 48) == 48
    assert em.quantile(np.array([1.0, 0.0, 0.0]), 0.3, 48) == 0
    assert em.quantile(np.array([0.9, 0.0, 0.0, 0.0, 0.1]), 0.95, 20) == 20
    with pytest.raises(ValueError):
        em.quantile(np.array([1.0]), 0.0, 48)


@settings(max_examples=200)
@given(st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5).filter(lambda x: sum(x) > 1e-3),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_quantile_nondecreasing_in_sigma(w, s1, s2):
    p = np.array(w) / sum(w)
    lo, hi = sorted((s1, s2))
    assert em.quantile(p, lo, 48) <= em.quantile(p, hi, 48)


def test_uncertainty_set_examples(rig):
    pose = RobotPose()
    centre = (rig.cu, rig.cv)
    s = em.uncertainty_set(rig, pose, centre, 10, 0)
    assert s.disparities.tolist() == [10] and em.epsilon_bound(s) == 0
    s = em.uncertainty_set(rig, pose, centre, 10, 1)
    assert s.disparities.tolist() == [9, 10, 11]
    assert em.epsilon_bound(s) == pytest.approx(10 * (1 / 9 - 1 / 10))
    assert em.uncertainty_set(rig, pose, centre, 1, 3).disparities.tolist() == [1, 2, 3, 4]
    d_star, rho = em.worst_case_disparity(s)
    assert d_star == 11 and rho[0] == pytest.approx(10 / 11)
    assert em.worst_case_disparity(em.uncertainty_set(rig, pose, centre, 10, 0))[0] == 10
    assert em.worst_case_disparity(em.uncertainty_set(rig, pose, centre, rig.d_max, 2))[0] == rig.d_max
    with pytest.raises(em.EmptySet):
        em.uncertainty_set(rig, pose, centre, 0, 0)


def test_epsilon_bounds_every_member(rig, rng):
    for _ in range(200):
        pose = RobotPose(*rng.uniform(-2, 2, 3))
        p = (int(rng.integers(0, rig.width)), int(rng.integers(0, rig.height)))
        d = int(rng.integers(1, rig.d_max + 1))
        q = int(rng.integers(0, 6))
        s = em.uncertainty_set(rig, pose, p, d, q)
        eps = em.epsilon_bound(s)
        assert np.all(np.linalg.norm(s.points - s.measured, axis=1) <= eps + 1e-15)
        assert s.lo <= s.d_hat <= s.hi and 1 <= s.lo and s.hi <= rig.d_max
        np.testing.assert_allclose(s.measured, s.points[s.d_hat - s.lo])
        assert em.epsilon_bound(em.uncertainty_set(rig, pose, p, d, q + 1)) >= eps


def test_intervals_vectorised():
    lo, hi, ok = em.intervals(np.array([10, 1, 48, 0]), np.array([1, 3, 2, 0]), 48)
    assert lo.tolist() == [9, 1, 46, 1] and hi.tolist() == [11, 4, 48, 0]
    assert ok.tolist() == [True, True, True, False]


def test_model_file_round_trip(tmp_path, rng):
    p = em.ErrorModelParams(rng.normal(size=(6, 5)))
    em.save_model(tmp_path / "m.bin", p)
    assert np.array_equal(em.load_model(tmp_path / "m.bin").weights, p.weights)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"SCEM" and len(raw) == 16 + 8 * 30
    (tmp_path / "v.bin").write_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(ValueError):
        em.load_model(tmp_path / "v.bin")
