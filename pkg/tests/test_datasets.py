import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aftsnn.datasets import (AER_DTYPE, bin_events, direct_encode, encode_aer, load_dataset, load_fmnist, load_idx,
                             load_nmnist, load_nmnist_split, parse_aer, read_idx, write_idx)
from aftsnn.errors import ConfigError, FormatError


def test_idx_hand_built_fixture(tmp_path):
    path = tmp_path / "tiny-images-idx3-ubyte"
    path.write_bytes(bytes([0, 0, 8, 3]) + struct.pack(">3I", 1, 2, 2) + bytes([0, 51, 255, 102]))
    images, labels = load_idx(path)
    assert labels is None
    np.testing.assert_allclose(images, [[[0.0, 0.2], [1.0, 0.4]]], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.booleans(), st.integers(0, 2**31))
def test_idx_round_trip(tmp_path_factory, dims, gz, seed):
    arr = np.random.default_rng(seed).integers(0, 256, size=dims, dtype=np.uint8)
    path = tmp_path_factory.mktemp("idx") / ("a.idx.gz" if gz else "a.idx")
    write_idx(path, arr)
    np.testing.assert_array_equal(read_idx(path), arr)


def test_idx_truncated_names_lengths(tmp_path):
    path = tmp_path / "t"
    path.write_bytes(bytes([0, 0, 8, 2]) + struct.pack(">2I", 3, 3) + bytes(5))
    with pytest.raises(FormatError, match="expected 21 bytes.*got 17") as e:
        read_idx(path)
    assert e.value.offset == 17


@pytest.mark.parametrize("header,offset", [(bytes([1, 0, 8, 1]), 0), (bytes([0, 0, 0x0D, 1]), 2), (bytes([0, 0]), 2)])
def test_idx_bad_header(tmp_path, header, offset):
    path = tmp_path / "b"
    path.write_bytes(header)
    with pytest.raises(FormatError) as e:
        read_idx(path)
    assert e.value.offset == offset


def test_idx_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "x-images-idx3-ubyte", np.zeros((3, 2, 2), np.uint8))
    write_idx(tmp_path / "x-labels-idx1-ubyte", np.zeros(2, np.uint8))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "x-images-idx3-ubyte")


def test_aer_single_record_round_trip():
    ev = np.array([(1, 2, 1, 100)], dtype=AER_DTYPE)
    raw = encode_aer(ev)
    assert raw == bytes([1, 2, 0x80, 0, 100])
    back = parse_aer(raw)
    assert back.tolist() == [(1, 2, 1, 100)]


def test_aer_timestamp_uses_23_bits():
    back = parse_aer(bytes([33, 0, 0x7F, 0xFF, 0xFF]))
    assert back[0]["ts"] == 2**23 - 1 and back[0]["p"] == 0


def test_aer_empty_and_bad_length(tmp_path):
    path = tmp_path / "e.bin"
    path.write_bytes(b"")
    assert len(load_nmnist(path)) == 0
    with pytest.raises(FormatError, match="multiple of 5"):
        parse_aer(bytes(7))


def test_aer_out_of_sensor_coordinates():
    with pytest.raises(FormatError) as e:
        parse_aer(bytes([1, 1, 0, 0, 1, 34, 1, 0, 0, 2]))
    assert e.value.offset == 5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 33), st.integers(0, 33), st.integers(0, 1), st.integers(0, 2**23 - 1)),
                max_size=50))
def test_aer_round_trip_property(events):
    ev = np.array(events, dtype=AER_DTYPE)
    assert parse_aer(encode_aer(ev)).tolist() == ev.tolist()


def test_bin_single_event_sets_one_bit():
    r = bin_events(np.array([(3, 4, 1, 500)], dtype=AER_DTYPE), 30)
    assert r.shape == (30, 2, 34, 34) and r.sum() == 1 and r[29, 1, 4, 3] == 1


def test_bin_is_binary_or():
    ev = np.array([(3, 4, 0, 10), (3, 4, 0, 11), (3, 4, 0, 999)], dtype=AER_DTYPE)
    r = bin_events(ev, 2)
    assert r[0, 0, 4, 3] == 1 and r[1, 0, 4, 3] == 1 and r.sum() == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 33), st.integers(0, 33), st.integers(0, 1), st.integers(0, 10**6)),
                max_size=60), st.integers(1, 40))
def test_bin_bits_bounded_by_events(events, T):
    r = bin_events(np.array(events, dtype=AER_DTYPE), T)
    assert set(np.unique(r)) <= {0, 1} and r.sum() <= len(events)


def test_bin_rejects_nonpositive_T():
    with pytest.raises(ConfigError):
        bin_events(np.zeros(0, AER_DTYPE), 0)


def test_direct_encode():
    assert not direct_encode(np.zeros((28, 28)), 5).currents.any()
    enc = direct_encode(np.ones((1, 1)), 5, label=3)
    assert enc.currents.shape == (5, 1, 1) and (enc.currents == 1.0).all() and enc.label == 3


def write_fmnist(root, n_train=12, n_test=6, seed=0):
    rng = np.random.default_rng(seed)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        write_idx(root / f"{prefix}-images-idx3-ubyte.gz", rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
        write_idx(root / f"{prefix}-labels-idx1-ubyte.gz", rng.integers(0, 10, n, dtype=np.uint8))


def write_nmnist(root, per_digit=2, seed=0):
    rng = np.random.default_rng(seed)
    for split in ("Train", "Test"):
        for d in range(10):
            folder = root / split / str(d)
            folder.mkdir(parents=True)
            for k in range(per_digit):
                n = 40
                ev = np.zeros(n, AER_DTYPE)
                ev["x"], ev["y"] = rng.integers(0, 34, n), rng.integers(0, 34, n)
                ev["p"], ev["ts"] = rng.integers(0, 2, n), np.sort(rng.integers(0, 300000, n))
                (folder / f"{k:05d}.bin").write_bytes(encode_aer(ev))


def test_fmnist_split_loader(tmp_path):
    write_fmnist(tmp_path)
    train = load_fmnist(tmp_path, "train")
    x, y = train.batch([0, 1])
    assert len(train) == 12 and x.shape == (2, 1, 28, 28) and 0 <= x.min() and x.max() <= 1
    assert len(load_dataset("fmnist", tmp_path, "test", 5)) == 6


def test_nmnist_split_loader_and_cache(tmp_path):
    write_nmnist(tmp_path)
    ds = load_nmnist_split(tmp_path, "test", 30)
    x, y = ds.batch(np.arange(len(ds)))
    assert x.shape == (20, 30, 2, 34, 34) and sorted(set(y)) == list(range(10))
    first = sorted((tmp_path / "Test" / "0").glob("*.bin"))[0]
    np.testing.assert_array_equal(x[0], bin_events(load_nmnist(first), 30))
    assert (tmp_path / ".nmnist_test_T30.npz").exists()
    again = load_nmnist_split(tmp_path, "test", 30)
    np.testing.assert_array_equal(again.batch([3])[0], ds.batch([3])[0])


def test_missing_data_dir(tmp_path, monkeypatch):
    monkeypatch.delenv("SNN_DATA_DIR", raising=False)
    with pytest.raises(ConfigError):
        load_dataset("nmnist", None, "train", 30)
    with pytest.raises(ConfigError):
        load_dataset("nmnist", tmp_path / "nope", "train", 30)
    monkeypatch.setenv("SNN_DATA_DIR", str(tmp_path))
    with pytest.raises(ConfigError, match="Train"):
        load_dataset("nmnist", None, "train", 30)
