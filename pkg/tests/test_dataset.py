import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigzsl import dataset as ds
from sigzsl.errors import FormatError

NAMES = ["BPSK", "QPSK", "8PSK", "16QAM", "64QAM", "PAM4", "GFSK", "CPFSK", "B-FM", "AM-DSB", "AM-SSB"]


def toy_corpus(per_class=4, classes=NAMES, snrs=(2, 4), seed=0):
    rng = np.random.default_rng(seed)
    n = per_class * len(classes)
    labels = np.repeat(np.arange(len(classes)), per_class)
    snr = np.tile(np.repeat(snrs, per_class // len(snrs)), len(classes))
    return ds.Corpus(rng.standard_normal((n, 2, 128)).astype(np.float32), labels, snr, list(classes))


def test_round_trip_is_byte_exact(tmp_path):
    c = toy_corpus(100)
    a, b = tmp_path / "a.sigds", tmp_path / "b.sigds"
    ds.write_sigds(c, a)
    back = ds.read_sigds(a)
    ds.write_sigds(back, b)
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(back.frames, c.frames) and np.array_equal(back.labels, c.labels)
    assert np.array_equal(back.snrs, c.snrs) and back.class_names == NAMES
    header = 16 + sum(2 + len(s.encode()) for s in NAMES)
    assert a.stat().st_size == header + 1100 * (2 + 2 + 1024)


def test_record_layout_is_i_then_q():
    c = ds.Corpus(np.arange(256, dtype=np.float32).reshape(1, 2, 128), [0], [-7], ["X"])
    raw = ds.to_bytes(c)
    body = raw[16 + 2 + 1 :]
    cls, snr = struct.unpack_from("<Hh", body)
    assert (cls, snr) == (0, -7)
    assert np.array_equal(np.frombuffer(body[4:], "<f4"), np.arange(256, dtype=np.float32))


@pytest.mark.parametrize("cut", [3, 20, -1, -1028])
def test_truncation_is_rejected(cut):
    raw = ds.to_bytes(toy_corpus(2))
    with pytest.raises(FormatError):
        ds.from_bytes(raw[:cut])


def test_bad_magic_version_and_trailing():
    raw = ds.to_bytes(toy_corpus(2))
    for bad in (b"SIG2" + raw[4:], raw[:4] + b"\x02\x00" + raw[6:], raw + b"\0"):
        with pytest.raises(FormatError):
            ds.from_bytes(bad)


def test_sieve_keeps_upper_tenth_of_radioml_grid():
    grid = np.arange(-20, 20, 2)
    c = toy_corpus(20, classes=["A", "B"], snrs=grid)
    kept = ds.sieve_by_snr(c, 16)
    assert set(kept.snrs.tolist()) == {16, 18}
    assert len(kept) * 10 == len(c)
    assert ds.sieve_by_snr(c, None) is c
    assert ds.sieve_by_snr(c, -np.inf) is c
    with pytest.warns(UserWarning):
        assert len(ds.sieve_by_snr(c, 100)) == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-30, 40), min_size=1, max_size=50), st.integers(-30, 40))
def test_sieve_preserves_order(snrs, cut):
    c = ds.Corpus(np.zeros((len(snrs), 2, 4)), np.zeros(len(snrs)), snrs, ["A"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kept = ds.sieve_by_snr(c, cut)
    assert kept.snrs.tolist() == [s for s in snrs if s >= cut]


def test_split_sizes_match_reference_counts():
    labels = np.repeat(np.arange(11), 2000)
    c = ds.Corpus(np.zeros((len(labels), 2, 1), np.float32), labels, np.zeros(len(labels)), NAMES)
    s = ds.split_dataset(c, ds.SplitSpec(unknown=(7, 8), seed=3))
    assert (len(s.train), len(s.val_known), len(s.test_known), len(s.test_unknown)) == (12600, 2700, 2700, 600)
    assert set(s.train.labels.tolist()).isdisjoint({7, 8})
    assert set(s.val_known.labels.tolist()).isdisjoint({7, 8})


def test_split_all_train_and_unassigned():
    c = toy_corpus(10, classes=["A", "B"], snrs=(0,))
    s = ds.split_dataset(c, ds.SplitSpec(1.0, 0.0, 0.0))
    assert len(s.train) == 20 and not len(s.val_known) and not len(s.test_unknown)
    with pytest.raises(ValueError):
        ds.split_dataset(c, ds.SplitSpec(known=(0,)))
    with pytest.raises(ValueError):
        ds.SplitSpec(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        ds.SplitSpec(known=(0,), unknown=(0,))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=6), st.integers(0, 2**31), st.data())
def test_split_is_a_stratified_partition(sizes, seed, data):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    c = ds.Corpus(np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1), labels, np.zeros(len(labels)),
                  [f"c{i}" for i in range(len(sizes))])
    unknown = tuple(data.draw(st.sets(st.integers(0, len(sizes) - 1), max_size=len(sizes) - 1)))
    spec = ds.SplitSpec(unknown=unknown, seed=seed)
    s = ds.split_dataset(c, spec)
    ids = [part.frames.ravel().astype(int) for part in (s.train, s.val_known, s.test_known, s.test_unknown)]
    allids = np.concatenate(ids)
    assert len(allids) == len(set(allids.tolist()))
    for k, m in enumerate(sizes):
        if k in unknown:
            assert np.sum(s.test_unknown.labels == k) == int(0.15 * m + 1e-9)
            assert k not in s.train.labels and k not in s.val_known.labels
        else:
            n_val = np.sum(s.val_known.labels == k)
            n_test = np.sum(s.test_known.labels == k)
            assert n_val == n_test == int(0.15 * m + 1e-9)
            assert np.sum(s.train.labels == k) == m - n_val - n_test
    again = ds.split_dataset(c, spec)
    assert np.array_equal(again.train.frames, s.train.frames)


def test_relabel():
    assert ds.relabel(np.array([3, 0, 5]), (0, 3, 5)).tolist() == [1, 0, 2]
    with pytest.raises(ValueError):
        ds.relabel(np.array([1]), (0, 3))
