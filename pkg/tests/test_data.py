import gzip
import struct

import numpy as np
import pytest

from r2lab.data import Dataset, load_idx, synth_gaussian, write_idx
from r2lab.errors import ConsistencyError, DomainError, FormatError


def idx_bytes(magic, dims, payload):
    return struct.pack(">I" + "I" * len(dims), magic, *dims) + bytes(payload)


@pytest.fixture
def idx_pair(tmp_path):
    # two 2x2 images, handcrafted byte by byte
    images = idx_bytes(0x803, (2, 2, 2), [0, 255, 128, 64, 1, 2, 3, 4])
    labels = idx_bytes(0x801, (2,), [7, 3])
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(images)
    lp.write_bytes(labels)
    return ip, lp


def test_load_idx_exact_pixels(idx_pair):
    ds = load_idx(*idx_pair, num_classes=10)
    assert ds.images.shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(ds.images[0, 0], np.array([[0, 255], [128, 64]]) / 255.0)
    np.testing.assert_array_equal(ds.labels, [7, 3])


def test_load_idx_gzip(tmp_path, idx_pair):
    ip, lp = idx_pair
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    np.testing.assert_array_equal(load_idx(gz, lp, 10).images, load_idx(ip, lp, 10).images)


def test_truncated_payload(tmp_path, idx_pair):
    ip, lp = idx_pair
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_idx(ip, lp)


def test_truncated_header(tmp_path, idx_pair):
    ip, lp = idx_pair
    ip.write_bytes(ip.read_bytes()[:6])
    with pytest.raises(FormatError):
        load_idx(ip, lp)


def test_bad_magic(tmp_path, idx_pair):
    ip, lp = idx_pair
    with pytest.raises(FormatError):
        load_idx(lp, ip)


def test_count_mismatch(tmp_path, idx_pair):
    ip, lp = idx_pair
    lp.write_bytes(idx_bytes(0x801, (3,), [1, 2, 3]))
    with pytest.raises(ConsistencyError):
        load_idx(ip, lp)


def test_write_idx_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 4, 3)).astype(np.uint8)
    labs = rng.integers(0, 10, 5).astype(np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", labs)
    ds = load_idx(tmp_path / "i", tmp_path / "l", 10)
    np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)


def test_synth_same_seed_identical():
    a = synth_gaussian(50, seed=4, dim=49)
    b = synth_gaussian(50, seed=4, dim=49)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.images.shape == (50, 1, 7, 7)


def test_synth_errors():
    with pytest.raises(DomainError):
        synth_gaussian(0)
    with pytest.raises(DomainError):
        synth_gaussian(10, classes=1)


def test_synth_clip_and_active_window():
    ds = synth_gaussian(200, clip=True, active=0.5, noise=0.5, seed=1)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    border = np.ones((28, 28), dtype=bool)
    border[7:21, 7:21] = False
    assert not ds.images[:, 0][:, border].any()


def test_synth_well_separated_is_linearly_separable():
    # nearest-class-mean classifier on 10-sigma separated classes
    train = synth_gaussian(2000, separation=10.0, noise=0.3, seed=0)
    test = synth_gaussian(1000, separation=10.0, noise=0.3, seed=1)
    x, xt = train.images.reshape(len(train), -1), test.images.reshape(len(test), -1)
    means = np.stack([x[train.labels == c].mean(0) for c in range(10)])
    w, b = means, -0.5 * (means ** 2).sum(1)
    acc = ((xt @ w.T + b).argmax(1) == test.labels).mean()
    assert acc >= 0.99


def test_batches_shuffle_is_seeded():
    ds = synth_gaussian(37, seed=0, dim=16)
    a = [y.tolist() for _, y in ds.batches(8, seed=5)]
    b = [y.tolist() for _, y in ds.batches(8, seed=5)]
    assert a == b and sum(len(x) for x in a) == 37
    plain = np.concatenate([y for _, y in ds.batches(8)])
    np.testing.assert_array_equal(plain, ds.labels)


def test_dataset_checks_labels():
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0, 5]), 3)
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0]), 3)
