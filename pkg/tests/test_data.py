import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgetattack import data
from forgetattack.errors import ConfigError, FormatError


def test_single_class_labels_zero():
    ds = data.gen_blobs(30, 2, 1, 1.0, seed=0)
    assert np.all(ds.labels == 0)


def test_gen_blobs_deterministic():
    a, b = data.gen_blobs(100, 4, 3, 2.0, 5), data.gen_blobs(100, 4, 3, 2.0, 5)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_gen_blobs_rejects_bad_args():
    with pytest.raises(ConfigError):
        data.gen_blobs(10, 0, 2, 1.0, 0)
    with pytest.raises(ConfigError):
        data.gen_blobs(10, 2, 2, 0.0, 0)
    with pytest.raises(ConfigError):
        data.gen_blobs(1, 2, 2, 1.0, 0)


def test_wide_blobs_linearly_probeable():
    ds = data.gen_blobs(1000, 8, 4, 10.0, seed=0)
    # least-squares one-hot probe with intercept
    A = np.hstack([ds.features, np.ones((len(ds), 1))])
    Y = np.eye(4)[ds.labels]
    W, *_ = np.linalg.lstsq(A, Y, rcond=None)
    assert ((A @ W).argmax(axis=1) == ds.labels).mean() >= 0.99


def test_split_invariants():
    ds = data.gen_blobs(200, 2, 2, 2.0, 0)
    sp = data.split(ds, adversary_fraction=0.5, victim_count=10, seed=3)
    sets = [set(sp.train), set(sp.holdout), set(sp.victims), set(sp.test)]
    assert sum(len(s) for s in sets) == 200
    assert len(set().union(*sets)) == 200
    assert set(sp.adversary) <= set(sp.train)
    assert len(sp.victims) == 10
    assert len(sp.adversary) == 60


def test_split_edge_cases():
    ds = data.gen_blobs(100, 2, 2, 2.0, 0)
    sp = data.split(ds, adversary_fraction=1.0, victim_count=0)
    np.testing.assert_array_equal(sp.adversary, sp.train)
    assert sp.victims.size == 0
    again = data.split(ds, adversary_fraction=1.0, victim_count=0)
    np.testing.assert_array_equal(sp.test, again.test)


def test_split_rejects_impossible():
    ds = data.gen_blobs(50, 2, 2, 2.0, 0)
    with pytest.raises(ConfigError):
        data.split(ds, {"train": 0.5, "holdout": 0.2, "test": 0.2})
    with pytest.raises(ConfigError):
        data.split(ds, victim_count=11)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(20, 300), seed=st.integers(0, 2**31), adv=st.floats(0, 1),
       tr=st.floats(0.2, 0.7))
def test_split_partition_property(n, seed, adv, tr):
    ds = data.gen_blobs(n, 2, 2, 1.0, seed % 100)
    fr = {"train": tr, "holdout": (1 - tr) / 2, "test": 1 - tr - (1 - tr) / 2}
    sp = data.split(ds, fr, adv, victim_count=0, seed=seed)
    allidx = np.concatenate([sp.train, sp.holdout, sp.victims, sp.test])
    assert np.array_equal(np.sort(allidx), np.arange(n))
    assert np.isin(sp.adversary, sp.train).all()


def test_round_trip(tmp_path):
    ds = data.gen_blobs(50, 3, 4, 2.0, 1)
    data.dataset_io(tmp_path / "d.uuad", ds)
    back = data.dataset_io(tmp_path / "d.uuad")
    assert back == data.Dataset(ds.features.astype(np.float32), ds.labels, 4)


def test_hand_encoded_file(tmp_path):
    X = [[1.5, -2.0], [0.25, 3.0], [-1.0, 0.0]]
    y = [2, 0, 1]
    raw = b"UUAD" + struct.pack("<4I", 1, 3, 2, 3)
    raw += struct.pack("<6f", *sum(X, [])) + struct.pack("<3I", *y)
    (tmp_path / "h.uuad").write_bytes(raw)
    ds = data.read_dataset(tmp_path / "h.uuad")
    np.testing.assert_array_equal(ds.features, X)
    np.testing.assert_array_equal(ds.labels, y)
    assert ds.class_count == 3


def test_format_errors(tmp_path):
    ds = data.gen_blobs(5, 2, 2, 1.0, 0)
    p = tmp_path / "d.uuad"
    data.write_dataset(p, ds)
    raw = p.read_bytes()
    p.write_bytes(b"XUAD" + raw[4:])
    with pytest.raises(FormatError) as e:
        data.read_dataset(p)
    assert e.value.offset == 0
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError) as e:
        data.read_dataset(p)
    assert e.value.offset == len(raw) - 3


def test_csv_round_trip(tmp_path):
    ds = data.gen_blobs(12, 3, 3, 1.0, 2)
    data.write_csv(tmp_path / "d.csv", ds)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "f0,f1,f2,label"
    assert data.read_csv(tmp_path / "d.csv", 3) == ds
