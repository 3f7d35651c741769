import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgetattack import metrics
from forgetattack.errors import ConfigError, EmptyInputError

from oracles import brute_ace, brute_brier, brute_ece, fixture_4


def test_ece_hand_fixture():
    P, y = fixture_4()
    assert metrics.ece(P, y, bins=2) == pytest.approx(0.4, abs=1e-12)


def test_ace_hand_fixture():
    P, y = fixture_4()
    assert metrics.ace(P, y, bins=2) == pytest.approx(0.4, abs=1e-12)


def test_perfect_confident_predictions():
    P = np.eye(3)[[0, 1, 2, 1]]
    assert metrics.ece(P, [0, 1, 2, 1]) == 0.0
    assert metrics.brier(P, [0, 1, 2, 1]) == 0.0


def test_brier_examples():
    assert metrics.brier([[0.7, 0.3]], [0]) == pytest.approx(0.18)
    assert metrics.brier([[0.5, 0.5], [0.5, 0.5]], [0, 1]) == pytest.approx(0.5)


def test_ace_identical_confidences():
    P = np.tile([0.7, 0.2, 0.1], (10, 1))
    y = np.array([0] * 6 + [1] * 4)
    assert metrics.ace(P, y, bins=5) == pytest.approx(abs(0.6 - 0.7), abs=1e-12)


def test_calibrated_generator():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(5), size=100_000)
    y = (rng.random((len(P), 1)) > P.cumsum(axis=1)).sum(axis=1).clip(0, 4)
    assert metrics.ece(P, y) <= 0.02
    assert metrics.ace(P, y) <= 0.02


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 100), C=st.integers(2, 6), bins=st.integers(1, 20))
def test_metrics_match_brute_force(seed, n, C, bins):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(C) * 0.5, size=n)
    y = rng.integers(0, C, n)
    assert abs(metrics.ece(P, y, bins) - brute_ece(P, y, bins)) <= 1e-12
    assert abs(metrics.brier(P, y) - brute_brier(P, y)) <= 1e-12
    if n >= bins:
        assert abs(metrics.ace(P, y, bins) - brute_ace(P, y, bins)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(4), size=30)
    y = rng.integers(0, 4, 30)
    perm = rng.permutation(30)
    for f in (metrics.ece, metrics.ace, metrics.brier):
        assert f(P, y) == pytest.approx(f(P[perm], y[perm]), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_ece_equals_ace_single_bin(seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(3), size=25)
    y = rng.integers(0, 3, 25)
    assert metrics.ece(P, y, 1) == pytest.approx(metrics.ace(P, y, 1), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_report_ranges(seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(3) * 0.3, size=20)
    y = rng.integers(0, 3, 20)
    r = metrics.make_report(P, y)
    assert 0 <= r.ece <= 1 and 0 <= r.ace <= 1 and 0 <= r.brier <= 2


def test_label_preservation():
    assert metrics.label_preservation([1, 2, 3], [1, 2, 3]) == 1.0
    assert metrics.label_preservation([1, 2], [0, 0]) == 0.0
    assert metrics.label_preservation(list(range(10)), list(range(9)) + [0]) == 0.9


def test_errors():
    with pytest.raises(EmptyInputError):
        metrics.ece(np.zeros((0, 3)), [])
    with pytest.raises(ConfigError):
        metrics.ece([[0.5, 0.5]], [0], bins=0)
    with pytest.raises(ConfigError):
        metrics.ace([[0.5, 0.5]], [0], bins=3)


def test_increment_ratios_and_report_dict():
    a = metrics.Report(0.1, 0.2, 0.3, 0.9)
    b = metrics.Report(0.3, 0.1, 0.3, 0.9)
    inc = metrics.increment_ratios(a, b)
    assert inc["ece"] == pytest.approx(2.0)
    assert inc["ace"] == pytest.approx(-0.5)
    assert inc["brier"] == 0.0
    assert a.to_dict()["coverage"] is None


def test_reliability_table_counts():
    P, y = fixture_4()
    rows = metrics.reliability_table(P, y, bins=2)
    assert [r[3] for r in rows] == [2, 2]
    assert rows[1][4] == 0.5 and rows[1][5] == pytest.approx(0.9)
