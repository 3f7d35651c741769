import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from forgetattack import metrics, ndcore, uq
from forgetattack.errors import ConfigError, DegenerateDataError


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_zero_logits_uniform():
    m = ndcore.ModelParams((2, 3, 4), np.zeros(ndcore.param_count((2, 3, 4))))
    p = uq.estimate(uq.Estimator("softmax", (m,)), [1.0, 2.0])
    np.testing.assert_allclose(p, [0.25] * 4)


def test_ensemble_of_identical_members(tiny_model):
    x = np.array([[0.1, 0.2, -0.3], [1.0, 0.0, 2.0]])
    single = uq.estimate(uq.Estimator("softmax", (tiny_model,)), x)
    ens = uq.estimate(uq.Estimator("ensemble", (tiny_model, tiny_model, tiny_model)), x)
    np.testing.assert_allclose(ens, single, atol=1e-15)


def test_mc_dropout_matches_per_pass_oracle():
    m = ndcore.init_params((3, 16, 8, 3), seed=4, dropout_rate=0.1)
    x = np.random.default_rng(0).normal(size=(5, 3))
    est = uq.Estimator("mc_dropout", (m,), mc_samples=30, mc_seed=11)
    oracle = np.mean([_softmax(ndcore.forward(m, x, dropout_seed=11 + k)) for k in range(30)], axis=0)
    np.testing.assert_allclose(uq.estimate(est, x), oracle, atol=1e-14)
    np.testing.assert_array_equal(uq.estimate(est, x), uq.estimate(est, x))


def test_estimator_validation(tiny_model):
    with pytest.raises(ConfigError):
        uq.Estimator("ensemble", ())
    with pytest.raises(ConfigError):
        uq.Estimator("ensemble", (tiny_model,))
    with pytest.raises(ConfigError):
        uq.Estimator("mc_dropout", (tiny_model,), mc_samples=0)
    with pytest.raises(ConfigError):
        uq.Estimator("bayes", (tiny_model,))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 5000), kind=st.sampled_from(["softmax", "ensemble", "mc_dropout"]))
def test_estimates_are_probability_vectors(seed, kind):
    rate = 0.2 if kind == "mc_dropout" else 0.0
    members = [ndcore.init_params((3, 6, 4), seed + i, rate) for i in range(2 if kind == "ensemble" else 1)]
    P = uq.estimate(uq.Estimator(kind, members, mc_samples=5), np.random.default_rng(seed).normal(size=(6, 3)))
    assert (P >= 0).all()
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)


def test_estimate_vjp_matches_finite_difference():
    from conftest import fd_grad

    models = [ndcore.init_params((3, 5, 3), s, 0.3) for s in (1, 2)]
    rng = np.random.default_rng(0)
    X, W = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    for est in (uq.Estimator("ensemble", models), uq.Estimator("mc_dropout", models[:1], mc_samples=4)):
        g = uq.estimate_vjp(est, X, W)
        f = lambda th: float((uq.estimate(est.with_flat_params(th), X) * W).sum())
        np.testing.assert_allclose(g, fd_grad(f, est.flat_params()), atol=1e-6)


def test_temperature_on_calibrated_logits():
    rng = np.random.default_rng(0)
    z = 2.0 * rng.normal(size=(20000, 5))
    p = _softmax(z)
    y = (rng.random((20000, 1)) > p.cumsum(axis=1)).sum(axis=1)
    T = uq.fit_calibrator("ts", z, y).temperature
    assert 0.95 <= T <= 1.05


def test_temperature_recovers_scaling():
    rng = np.random.default_rng(1)
    z = 2.0 * rng.normal(size=(20000, 4))
    y = (rng.random((20000, 1)) > _softmax(z).cumsum(axis=1)).sum(axis=1)
    assert abs(uq.fit_calibrator("ts", 3.0 * z, y).temperature - 3.0) < 0.15


def test_golden_section_quadratic():
    assert abs(uq.golden_section(lambda t: (t - 1.7) ** 2, 0.05, 20.0) - 1.7) < 1e-5


def test_ets_weight_identity():
    z = np.random.default_rng(2).normal(size=(10, 3))
    ts = uq.CalibratorParams("ts", temperature=1.7)
    ets = uq.CalibratorParams("ets", temperature=1.7, ets_weights=(1.0, 0.0, 0.0))
    np.testing.assert_array_equal(uq.apply_calibrator(ts, z), uq.apply_calibrator(ets, z))


def test_ets_fit_on_simplex():
    rng = np.random.default_rng(3)
    z = 3 * rng.normal(size=(500, 4))
    y = rng.integers(0, 4, 500)
    cal = uq.fit_calibrator("ets", z, y)
    w = np.array(cal.ets_weights)
    assert (w >= 0).all() and abs(w.sum() - 1) < 1e-12
    # labels independent of logits: the uniform component should dominate
    assert w[2] > 0.5


def test_pav_hand_trace():
    # 1 | 3 2 -> 2.5 2.5 | 4 3 -> 3.5 3.5 | 5
    np.testing.assert_allclose(uq.pav([1, 3, 2, 4, 3, 5]), [1, 2.5, 2.5, 3.5, 3.5, 5])
    np.testing.assert_allclose(uq.pav([3, 2, 1]), [2, 2, 2])
    np.testing.assert_allclose(uq.pav([1, 0], [3, 1]), [0.75, 0.75])


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.integers(1, 40), elements=st.floats(-5, 5)))
def test_pav_monotone_and_mean_preserving(y):
    fit = uq.pav(y)
    assert np.all(np.diff(fit) >= -1e-12)
    assert abs(fit.sum() - y.sum()) <= 1e-9 * (1 + np.abs(y).sum())


def test_ir_reduces_calibration_error():
    rng = np.random.default_rng(5)
    z = 4 * rng.normal(size=(3000, 3))
    y = (rng.random((3000, 1)) > _softmax(z / 3).cumsum(axis=1)).sum(axis=1)
    cal = uq.fit_calibrator("ir", z, y)
    for xs, ys in cal.ir_maps:
        assert np.all(np.diff(ys) >= 0)
    out = uq.apply_calibrator(cal, z)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert metrics.ece(out, y) < metrics.ece(_softmax(z), y)


def test_ts_limits():
    z = np.array([[3.0, -1.0, 0.5], [0.0, 10.0, 2.0]])
    np.testing.assert_allclose(uq.apply_calibrator(uq.CalibratorParams("ts", 1.0), z), _softmax(z))
    flat = uq.apply_calibrator(uq.CalibratorParams("ts", 1e4), z)
    assert flat.max() <= 1 / 3 + 1e-3


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 5), elements=st.floats(-30, 30)), st.floats(0.05, 20))
def test_ts_preserves_argmax(z, T):
    out = uq.apply_calibrator(uq.CalibratorParams("ts", T), z)
    np.testing.assert_array_equal(out.argmax(axis=1), _softmax(z).argmax(axis=1))


def test_calibrator_degenerate():
    with pytest.raises(DegenerateDataError):
        uq.fit_calibrator("ts", np.zeros((5, 3)), np.zeros(5, dtype=int))


@pytest.mark.parametrize("kind", ["ts", "ets", "ir"])
def test_calibrator_round_trip(tmp_path, kind):
    rng = np.random.default_rng(6)
    z, y = 2 * rng.normal(size=(300, 3)), rng.integers(0, 3, 300)
    cal = uq.fit_calibrator(kind, z, y)
    uq.save_calibrator(cal, tmp_path / "c.bin")
    back = uq.load_calibrator(tmp_path / "c.bin")
    assert (tmp_path / "c.bin").read_bytes()[:5] == b"UUCAL"
    np.testing.assert_array_equal(uq.apply_calibrator(back, z), uq.apply_calibrator(cal, z))
