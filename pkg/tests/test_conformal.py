import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgetattack import conformal as cf
from forgetattack.errors import CalibrationSizeError, ConfigError


def brute_score(kind, p, label, k_reg=2, lam=0.1):
    # independent oracle: rank by descending probability, stable on ties
    order = sorted(range(len(p)), key=lambda c: (-p[c], c))
    rank = order.index(label) + 1
    if kind == "hps":
        return 1 - p[label]
    s = sum(p[c] for c in order[:rank])
    if kind == "raps":
        s += lam * max(0, rank - k_reg)
    return s


def test_score_examples():
    assert cf.nonconformity_score("hps", [0.0, 1.0], 1) == 0.0
    assert cf.nonconformity_score("aps", [0.5, 0.3, 0.2], 1) == pytest.approx(0.8)
    assert cf.nonconformity_score("raps", [0.5, 0.3, 0.2], 2, k_reg=1, lambda_reg=0.1) == pytest.approx(1.2)


def test_score_bad_label():
    with pytest.raises(IndexError):
        cf.nonconformity_score("aps", [0.5, 0.5], 2)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(cf.KINDS), C=st.integers(2, 8))
def test_scores_match_brute_force(seed, kind, C):
    p = np.random.default_rng(seed).dirichlet(np.ones(C))
    got = cf.all_scores(kind, p)[0]
    for c in range(C):
        assert got[c] == pytest.approx(brute_score(kind, list(p), c), abs=1e-12)


def test_calibrate_examples():
    s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert cf.conformal_calibrate(s, 0.1) == 0.9
    assert cf.conformal_calibrate(np.arange(1, 11) / 10, 0.99) == 0.1


def test_calibrate_too_few():
    with pytest.raises(CalibrationSizeError):
        cf.conformal_calibrate([0.1, 0.2, 0.3], 0.1)
    with pytest.raises(CalibrationSizeError):
        cf.conformal_calibrate([], 0.5)


def test_predict_set_examples():
    full = cf.ConformalPredictor("aps", qhat=1.0 + 1e-9)
    assert cf.predict_set(full, [0.2, 0.5, 0.3]).all()
    hps = cf.ConformalPredictor("hps", qhat=0.4)
    np.testing.assert_array_equal(cf.predict_set(hps, [0.7, 0.2, 0.1]), [True, False, False])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(cf.KINDS), q=st.floats(0, 1.5))
def test_sets_match_exhaustive_labels_and_are_prefixes(seed, kind, q):
    p = np.random.default_rng(seed).dirichlet(np.ones(6))
    cp = cf.ConformalPredictor(kind, q)
    member = cf.predict_set(cp, p)
    expect = [brute_score(kind, list(p), c) <= q for c in range(6)]
    np.testing.assert_array_equal(member, expect)
    if kind != "hps":
        ordered = member[np.argsort(-p, kind="stable")]
        assert not np.any(ordered[1:] & ~ordered[:-1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(cf.KINDS), q1=st.floats(0, 1.5), q2=st.floats(0, 1.5))
def test_sets_monotone_in_qhat(seed, kind, q1, q2):
    lo, hi = sorted((q1, q2))
    P = np.random.default_rng(seed).dirichlet(np.ones(5), size=4)
    small = cf.predict_set(cf.ConformalPredictor(kind, lo), P)
    big = cf.predict_set(cf.ConformalPredictor(kind, hi), P)
    assert np.all(big | ~small)


@pytest.mark.parametrize("kind", cf.KINDS)
def test_monte_carlo_coverage(kind):
    rng = np.random.default_rng(0)
    covs = []
    for _ in range(1000):
        P = rng.dirichlet(np.ones(4) * 0.7, size=60)
        y = (rng.random((60, 1)) > P.cumsum(axis=1)).sum(axis=1).clip(0, 3)
        cp = cf.fit_conformal(kind, P[:40], y[:40], alpha=0.1)
        covs.append(cf.coverage(cp, P[40:], y[40:]))
    assert np.mean(covs) >= 0.9 - 0.02


def test_predictor_validation():
    with pytest.raises(ConfigError):
        cf.ConformalPredictor("lac", 0.5)
    with pytest.raises(ConfigError):
        cf.ConformalPredictor("aps", float("inf"))
    with pytest.raises(ConfigError):
        cf.ConformalPredictor("aps", 0.5, k_reg=-1)


def test_avg_set_size_and_coverage():
    cp = cf.ConformalPredictor("hps", 0.75)
    P = np.array([[0.5, 0.3, 0.2], [0.9, 0.05, 0.05]])
    assert cf.avg_set_size(cp, P) == 1.5
    assert cf.coverage(cp, P, [1, 2]) == 0.5
