import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MNIST_DIR, requires_mnist
from ifdetect.data import (
    FlipSpec,
    LabeledDataset,
    fisher_yates,
    flip_labels,
    load_dataset,
    load_idx,
    make_synthetic,
    manifest_for,
    restrict_classes,
    round_half_up,
    save_dataset,
    write_idx,
)
from ifdetect.errors import ArgumentError, ConsistencyError, FormatError, UsageError


def _ds(labels, true_labels=None, split="train", n_classes=3):
    labels = np.asarray(labels)
    true_labels = labels if true_labels is None else np.asarray(true_labels)
    return LabeledDataset(
        features=np.zeros((len(labels), 2, 2)),
        labels=labels,
        true_labels=true_labels,
        flip_mask=labels != true_labels,
        class_names=tuple(range(n_classes)),
        split_tag=split,
    )


class TestLabeledDataset:
    def test_length_mismatch(self):
        with pytest.raises(ConsistencyError):
            LabeledDataset(np.zeros((3, 2)), [0, 1], [0, 1], [False, False], (0, 1), "train")

    def test_flip_mask_must_match_labels(self):
        with pytest.raises(ConsistencyError):
            LabeledDataset(np.zeros((2, 2)), [0, 1], [0, 0], [False, False], (0, 1), "train")

    def test_label_out_of_range(self):
        with pytest.raises(ConsistencyError):
            _ds([0, 3], n_classes=3)

    def test_bad_split(self):
        with pytest.raises(ArgumentError):
            _ds([0, 1], split="val")

    def test_arrays_are_read_only(self):
        ds = _ds([0, 1, 2])
        with pytest.raises(ValueError):
            ds.labels[0] = 2

    def test_subset_keeps_invariants(self):
        ds = _ds([0, 1, 2, 1], [0, 1, 1, 1])
        sub = ds.subset([2, 3])
        assert sub.flip_mask.tolist() == [True, False]
        assert sub.class_names == ds.class_names


class TestFlipSpec:
    def test_same_class_rejected(self):
        with pytest.raises(ArgumentError):
            FlipSpec(9, 9, 0.2)

    @pytest.mark.parametrize("rate", [-0.1, 1.5])
    def test_rate_range(self, rate):
        with pytest.raises(ArgumentError):
            FlipSpec(9, 4, rate)


@pytest.mark.parametrize("x,want", [(0.5, 1), (1.5, 2), (2.5, 3), (1189.8, 1190), (0.49, 0), (3.0, 3)])
def test_round_half_up(x, want):
    assert round_half_up(x) == want


class TestIdx:
    def _write(self, tmp_path, pixels, labels, gz=False):
        suffix = ".gz" if gz else ""
        ds = LabeledDataset(pixels / 255.0, labels, labels, np.zeros(len(labels), bool), tuple(range(10)), "train")
        ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
        write_idx(ds, ip, lp)
        return ip, lp

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(0, 6),
        rows=st.integers(1, 5),
        cols=st.integers(1, 5),
        seed=st.integers(0, 2**16),
        gz=st.booleans(),
    )
    def test_round_trip(self, tmp_path_factory, n, rows, cols, seed, gz):
        rng = np.random.default_rng(seed)
        pixels = rng.integers(0, 256, (n, rows, cols), dtype=np.uint8)
        labels = rng.integers(0, 10, n)
        ip, lp = self._write(tmp_path_factory.mktemp("idx"), pixels, labels, gz)
        ds = load_idx(ip, lp)
        assert ds.features.shape == (n, rows, cols)
        np.testing.assert_array_equal(np.rint(ds.features * 255).astype(np.uint8), pixels)
        np.testing.assert_array_equal(ds.labels, labels)
        assert ds.features.min(initial=0) >= 0 and ds.features.max(initial=1) <= 1
        assert not ds.flip_mask.any()

    def test_bad_magic(self, tmp_path):
        ip, lp = self._write(tmp_path, np.zeros((2, 3, 3), np.uint8), np.array([1, 2]))
        raw = bytearray(ip.read_bytes())
        raw[3] = 0x01
        ip.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_idx(ip, lp)

    def test_truncated_body(self, tmp_path):
        ip, lp = self._write(tmp_path, np.zeros((2, 3, 3), np.uint8), np.array([1, 2]))
        ip.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(FormatError):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp = self._write(tmp_path, np.zeros((2, 3, 3), np.uint8), np.array([1, 2]))
        lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
        with pytest.raises(ConsistencyError):
            load_idx(ip, lp)

    def test_gzip_detected_by_suffix(self, tmp_path):
        ip, lp = self._write(tmp_path, np.full((1, 2, 2), 255, np.uint8), np.array([7]), gz=True)
        with gzip.open(ip) as fh:
            assert struct.unpack(">I", fh.read(4))[0] == 0x803
        assert load_idx(ip, lp).features.max() == 1.0


class TestRestrict:
    def test_reindexes_in_keep_order(self):
        ds = _ds([0, 1, 2, 2, 0], n_classes=3)
        out = restrict_classes(ds, [2, 0])
        assert out.class_names == (2, 0)
        assert out.labels.tolist() == [1, 0, 0, 1]

    def test_unknown_class(self):
        with pytest.raises(ArgumentError):
            restrict_classes(_ds([0, 1]), [0, 7])

    def test_empty_keep(self):
        with pytest.raises(ArgumentError):
            restrict_classes(_ds([0, 1]), [])


class TestFlip:
    def test_counts_and_only_source_changes(self):
        labels = np.array([0] * 7 + [1] * 10)
        ds = _ds(labels, n_classes=2)
        out = flip_labels(ds, FlipSpec(1, 0, 0.25, seed=3))
        assert out.flip_mask.sum() == round_half_up(0.25 * 10) == 3
        assert (out.true_labels[out.flip_mask] == 1).all()
        assert (out.labels[out.flip_mask] == 0).all()
        np.testing.assert_array_equal(out.labels[:7], labels[:7])

    @pytest.mark.parametrize("rate,count", [(0.0, 0), (1.0, 10)])
    def test_rate_endpoints(self, rate, count):
        ds = _ds(np.array([0] * 5 + [1] * 10), n_classes=2)
        assert flip_labels(ds, FlipSpec(1, 0, rate)).flip_mask.sum() == count

    def test_deterministic_per_seed(self):
        ds = _ds(np.array([1] * 40 + [0] * 3), n_classes=2)
        a = flip_labels(ds, FlipSpec(1, 0, 0.3, seed=5)).flip_mask
        b = flip_labels(ds, FlipSpec(1, 0, 0.3, seed=5)).flip_mask
        c = flip_labels(ds, FlipSpec(1, 0, 0.3, seed=6)).flip_mask
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_test_split_refused(self):
        with pytest.raises(UsageError):
            flip_labels(_ds([0, 1], split="test"), FlipSpec(1, 0, 0.5))

    def test_unknown_source(self):
        with pytest.raises(ArgumentError):
            flip_labels(_ds([0, 1], n_classes=2), FlipSpec(5, 0, 0.5))

    @settings(max_examples=40, deadline=None)
    @given(n_src=st.integers(0, 60), n_other=st.integers(0, 20), rate=st.floats(0, 1), seed=st.integers(0, 1000))
    def test_invariants(self, n_src, n_other, rate, seed):
        ds = _ds(np.array([1] * n_src + [0] * n_other, dtype=np.int64), n_classes=2)
        out = flip_labels(ds, FlipSpec(1, 0, rate, seed))
        assert out.flip_mask.sum() == round_half_up(rate * n_src)
        np.testing.assert_array_equal(out.flip_mask, out.labels != out.true_labels)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 200), seed=st.integers(0, 2**32 - 1))
def test_fisher_yates_is_a_permutation(n, seed):
    perm = fisher_yates(n, seed)
    assert sorted(perm.tolist()) == list(range(n))
    np.testing.assert_array_equal(perm, fisher_yates(n, seed))


class TestSynthetic:
    def test_shape_and_balance(self):
        ds = make_synthetic(30, 4, 3.0, seed=0)
        assert ds.features.shape == (60, 4)
        assert np.bincount(ds.labels).tolist() == [30, 30]
        assert ds.class_names == (0, 1)

    def test_means_sit_on_first_axis(self):
        ds = make_synthetic(4000, 2, 4.0, seed=1)
        m0 = ds.features[ds.labels == 0].mean(axis=0)
        m1 = ds.features[ds.labels == 1].mean(axis=0)
        np.testing.assert_allclose(m0, [-2, 0], atol=0.06)
        np.testing.assert_allclose(m1, [2, 0], atol=0.06)

    def test_seeded(self):
        np.testing.assert_array_equal(make_synthetic(5, 2, 1.0, 9).features, make_synthetic(5, 2, 1.0, 9).features)

    def test_bad_args(self):
        with pytest.raises(ArgumentError):
            make_synthetic(0, 2, 1.0, 0)
        with pytest.raises(ArgumentError):
            make_synthetic(3, 2, 0.0, 0)


class TestPersistence:
    def test_byte_features_round_trip(self, tmp_path):
        pixels = np.arange(2 * 3 * 3).reshape(2, 3, 3) * 10
        ds = LabeledDataset(pixels / 255.0, [1, 0], [1, 1], [False, True], (4, 9), "train")
        save_dataset(ds, tmp_path / "d.npz")
        back = load_dataset(tmp_path / "d.npz")
        np.testing.assert_array_equal(back.features, ds.features)
        assert back.class_names == (4, 9)
        np.testing.assert_array_equal(back.flip_mask, ds.flip_mask)

    def test_float_features_round_trip(self, tmp_path):
        ds = make_synthetic(3, 2, 1.0, 0, split="test")
        save_dataset(ds, tmp_path / "d.npz")
        back = load_dataset(tmp_path / "d.npz")
        np.testing.assert_array_equal(back.features, ds.features)
        assert back.split_tag == "test"

    def test_manifest(self):
        ds = flip_labels(_ds(np.array([1] * 10 + [0] * 2), n_classes=2), FlipSpec(1, 0, 0.2, 4))
        m = manifest_for(ds, FlipSpec(1, 0, 0.2, 4), seed=4).to_json()
        assert m["flip_count"] == 2 and m["n"] == 12 and m["flip_spec"]["rate"] == 0.2


@pytest.fixture(scope="module")
def mnist_train():
    return load_idx(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte")


@pytest.mark.mnist
@requires_mnist
class TestMnist:
    @pytest.fixture
    def train(self, mnist_train):
        return mnist_train

    def test_full_train_set(self, train):
        assert train.features.shape == (60000, 28, 28)

    def test_mnist49_counts(self, train):
        ds = restrict_classes(train, [4, 9])
        assert np.bincount(ds.true_labels).tolist() == [5842, 5949]

    def test_mnist49_test_counts(self):
        test = load_idx(MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte", "test")
        assert len(test) == 10000
        assert np.bincount(restrict_classes(test, [4, 9]).true_labels).tolist() == [982, 1009]

    def test_flip_count(self, train):
        ds = flip_labels(restrict_classes(train, [4, 9]), FlipSpec(9, 4, 0.2, seed=11))
        assert ds.flip_mask.sum() == 1190
