import struct

import numpy as np
import pytest

from mofhei.datasets import (
    load_egss_csv, load_mnist_idx, make_egss_csv, normalize_images,
    split_train_val, synthetic,
)
from mofhei.errors import DatasetError


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", 0x00000803, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", 0x00000801, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, size=12).astype(np.uint8)
    ip, lp = tmp_path / "imgs", tmp_path / "labels"
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)
    return str(ip), str(lp), images, labels


class TestMnistIdx:
    def test_loads_scaled_images_and_one_hot_labels(self, idx_pair):
        ip, lp, images, labels = idx_pair
        ds = load_mnist_idx(ip, lp)
        assert ds.x.shape == (12, 28, 28, 1)
        assert np.allclose(ds.x[..., 0], images / 255.0)
        assert ds.y.shape == (12, 10)
        assert np.array_equal(ds.y.argmax(axis=1), labels)

    def test_all_zero_image_normalizes_to_zero(self, tmp_path):
        ip, lp = tmp_path / "i", tmp_path / "l"
        write_idx_images(ip, np.zeros((1, 28, 28), dtype=np.uint8))
        write_idx_labels(lp, [3])
        ds = load_mnist_idx(str(ip), str(lp))
        assert (ds.x == 0).all()

    def test_bad_magic_rejected_with_offset(self, tmp_path, idx_pair):
        _, lp, _, _ = idx_pair
        bad = tmp_path / "bad"
        bad.write_bytes(struct.pack(">iiii", 0x00000999, 1, 28, 28) + b"\0" * 784)
        with pytest.raises(DatasetError) as ei:
            load_mnist_idx(str(bad), lp)
        assert ei.value.offset == 0

    def test_truncated_file_rejected(self, tmp_path, idx_pair):
        ip, lp, _, _ = idx_pair
        data = open(ip, "rb").read()
        trunc = tmp_path / "trunc"
        trunc.write_bytes(data[:-10])
        with pytest.raises(DatasetError):
            load_mnist_idx(str(trunc), lp)

    def test_count_mismatch_rejected(self, tmp_path, idx_pair):
        ip, _, _, _ = idx_pair
        lp2 = tmp_path / "short_labels"
        write_idx_labels(lp2, [1, 2, 3])
        with pytest.raises(DatasetError):
            load_mnist_idx(ip, str(lp2))


def test_normalize_is_idempotent():
    raw = np.random.default_rng(0).integers(0, 256, size=(4, 5)).astype(np.uint8)
    once = normalize_images(raw)
    twice = normalize_images(once)
    assert np.array_equal(once, twice)
    assert once.max() <= 1.0


def test_split_is_disjoint_and_deterministic():
    ds = synthetic("blobs", 100, seed=0)
    a1, b1 = split_train_val(ds, 20, seed=5)
    a2, b2 = split_train_val(ds, 20, seed=5)
    assert len(a1) == 80 and len(b1) == 20
    assert np.array_equal(a1.x, a2.x) and np.array_equal(b1.x, b2.x)
    joined = np.concatenate([a1.x, b1.x])
    assert np.unique(joined, axis=0).shape[0] == np.unique(ds.x, axis=0).shape[0]


class TestEgssCsv:
    def test_round_numbers_split_per_configuration(self, tmp_path):
        path = make_egss_csv(str(tmp_path / "egss.csv"), n=10000, seed=0)
        train, val, test = load_egss_csv(path)
        assert (len(train), len(val), len(test)) == (8550, 450, 1000)

    def test_proportional_split_and_scaling(self, tmp_path):
        path = make_egss_csv(str(tmp_path / "egss.csv"), n=1000, seed=0)
        train, val, test = load_egss_csv(path)
        assert (len(train), len(val), len(test)) == (855, 45, 100)
        # scaler fit on the training split: its min/max hit 0/1 exactly
        assert np.allclose(train.x.min(axis=0), 0.0)
        assert np.allclose(train.x.max(axis=0), 1.0)
        # val/test use the train scaler, so they may exceed [0, 1] slightly
        assert test.x.min() > -0.5 and test.x.max() < 1.5

    def test_labels_are_two_class_one_hot(self, tmp_path):
        path = make_egss_csv(str(tmp_path / "egss.csv"), n=500, seed=1)
        train, _, _ = load_egss_csv(path)
        assert train.y.shape[1] == 2
        assert set(np.unique(train.y)) == {0.0, 1.0}

    def test_constant_column_scales_to_zero(self, tmp_path):
        path = tmp_path / "c.csv"
        header = "tau1,tau2,tau3,tau4,p1,p2,p3,p4,g1,g2,g3,g4,stab,stabf\n"
        rows = "".join(
            f"5.0,{i},{i},{i},3.0,-1,-1,-1,0.5,0.5,0.5,0.5,0.1,unstable\n"
            for i in range(10)
        )
        path.write_text(header + rows)
        train, _, _ = load_egss_csv(str(path))
        assert (train.x[:, 0] == 0.0).all()  # tau1 constant

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("tau1,stabf\n1.0,stable\n")
        with pytest.raises(DatasetError):
            load_egss_csv(str(path))

    def test_non_numeric_cell_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        header = "tau1,tau2,tau3,tau4,p1,p2,p3,p4,g1,g2,g3,g4,stab,stabf\n"
        good = "1,2,3,4,1,-1,-1,-1,.5,.5,.5,.5,0.1,stable\n"
        bad = "1,2,oops,4,1,-1,-1,-1,.5,.5,.5,.5,0.1,stable\n"
        path.write_text(header + good + bad)
        with pytest.raises(DatasetError) as ei:
            load_egss_csv(str(path))
        assert ei.value.row == 3


class TestSynthetic:
    def test_xor_points(self):
        ds = synthetic("xor", 4)
        assert sorted(ds.x.tolist()) == [[0, 0], [0, 1], [1, 0], [1, 1]]
        for x, y in zip(ds.x, ds.y[:, 0]):
            assert y == float(int(x[0]) ^ int(x[1]))

    def test_linear_noise_free_is_exact(self):
        ds = synthetic("linear", 50, seed=3)
        assert np.allclose(ds.y, 2 * ds.x + 1)

    def test_same_seed_same_dataset(self):
        a = synthetic("mnist_like", 8, seed=9)
        b = synthetic("mnist_like", 8, seed=9)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_mnist_like_shapes_and_range(self):
        ds = synthetic("mnist_like", 16, seed=0)
        assert ds.x.shape == (16, 28, 28, 1)
        assert ds.y.shape == (16, 10)
        assert ds.x.min() >= 0.0 and ds.x.max() <= 1.0
        assert ds.x.max() > 0.5  # glyphs actually drawn

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            synthetic("spirals", 10)
