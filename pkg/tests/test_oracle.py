import csv

import numpy as np
import pytest

from ifdetect.data import FlipSpec, LabeledDataset, flip_labels, make_synthetic
from ifdetect.errors import ArgumentError, CapabilityError, SizeError
from ifdetect.model import ArchitectureSpec, grad, init_params, mean_loss_and_grad
from ifdetect.oracle import (
    fd_gradient_check,
    fd_hessian_check,
    loo_records_json,
    loo_sweep,
    minimize_full_batch,
    spearman,
)
from ifdetect.train import default_train_config

CONVEX = ArchitectureSpec("softmax_regression", (2,), 2)


def _perturbed(spec, seed, scale=0.5):
    p = init_params(spec, seed)
    return p.with_values(p.values + scale * np.random.default_rng(seed).standard_normal(p.n_params))


def _concat(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    return LabeledDataset(
        np.concatenate([a.features, b.features]),
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.true_labels, b.true_labels]),
        np.concatenate([a.flip_mask, b.flip_mask]),
        a.class_names,
        a.split_tag,
    )


class TestFiniteDifferences:
    def test_convex_gradient(self):
        spec = ArchitectureSpec("softmax_regression", (10,), 3)
        p = _perturbed(spec, 0)
        x = np.random.default_rng(1).standard_normal(10)
        assert fd_gradient_check(spec, p, (x, 2), h=1e-4) <= 1e-4

    def test_zero_gradient_sample_uses_absolute_error(self):
        spec = ArchitectureSpec("softmax_regression", (1,), 2)
        p = init_params(spec, 0).with_values(np.array([-50.0, 50.0, 0.0, 0.0]))
        x = np.array([10.0])
        assert np.abs(grad(p, x, 1).values).max() < 1e-200
        assert fd_gradient_check(spec, p, (x, 1), h=1e-4) <= 1e-8

    def test_cnn3_toy(self):
        spec = ArchitectureSpec("cnn3", (4, 4), 2)
        p = _perturbed(spec, 2, scale=0.1)
        x = np.random.default_rng(3).random((4, 4))
        assert fd_gradient_check(spec, p, (x, 1), h=1e-4, n_coords=40) <= 1e-3

    def test_spec_mismatch_and_bad_step(self):
        p = init_params(CONVEX, 0)
        with pytest.raises(ArgumentError):
            fd_gradient_check(ArchitectureSpec("softmax_regression", (3,), 2), p, (np.zeros(2), 0))
        with pytest.raises(ArgumentError):
            fd_gradient_check(CONVEX, p, (np.zeros(2), 0), h=0.0)

    def test_diag_exact_hessian(self):
        spec = ArchitectureSpec("softmax_regression", (10,), 2)
        ds = make_synthetic(25, 10, 2.0, seed=5)
        assert fd_hessian_check(spec, _perturbed(spec, 5, 0.3), ds, "diag_exact") <= 1e-3

    def test_lastlayer_hessian_d5(self):
        spec = ArchitectureSpec("softmax_regression", (5,), 2)
        ds = make_synthetic(25, 5, 2.0, seed=6)
        assert fd_hessian_check(spec, _perturbed(spec, 6), ds, "lastlayer_full") <= 1e-4

    def test_diag_fisher_is_a_measurement(self):
        spec = ArchitectureSpec("softmax_regression", (3,), 2)
        ds = make_synthetic(25, 3, 2.0, seed=7)
        dev = fd_hessian_check(spec, _perturbed(spec, 7), ds, "diag_fisher")
        assert np.isfinite(dev) and dev >= 0

    def test_capability_limits(self):
        big = ArchitectureSpec("softmax_regression", (1001,), 2)
        ds = LabeledDataset(np.zeros((2, 1001)), [0, 1], [0, 1], [False, False], (0, 1), "train")
        with pytest.raises(CapabilityError):
            fd_hessian_check(big, init_params(big, 0), ds, "diag_exact")
        mid = ArchitectureSpec("softmax_regression", (120,), 2)
        ds = LabeledDataset(np.zeros((2, 120)), [0, 1], [0, 1], [False, False], (0, 1), "train")
        with pytest.raises(CapabilityError):
            fd_hessian_check(mid, init_params(mid, 0), ds, "lastlayer_full")
        with pytest.raises(CapabilityError):
            fd_hessian_check(mid, init_params(mid, 0), ds, "kfac")


class TestStationarity:
    def test_newton_reaches_tolerance(self):
        ds = make_synthetic(30, 2, 1.5, seed=0)
        p, gnorm = minimize_full_batch(init_params(CONVEX, 0), ds, tol=1e-10)
        assert gnorm < 1e-10
        assert np.linalg.norm(mean_loss_and_grad(p, ds.features, ds.labels)[1]) < 1e-10

    def test_gradient_descent_for_non_convex(self):
        spec = ArchitectureSpec("mlp1", (2,), 2, hidden_width=3)
        ds = make_synthetic(15, 2, 1.5, seed=0)
        p0 = init_params(spec, 0)
        f0 = mean_loss_and_grad(p0, ds.features, ds.labels)[0]
        p, _ = minimize_full_batch(p0, ds, tol=1e-12, max_iter=50)
        assert mean_loss_and_grad(p, ds.features, ds.labels)[0] < f0


@pytest.fixture(scope="module")
def small():
    train = flip_labels(make_synthetic(15, 2, 3.0, seed=2), FlipSpec(1, 0, 0.2, seed=2))
    test = make_synthetic(5, 2, 3.0, seed=3, split="test")
    cfg = default_train_config("softmax_regression")
    result = loo_sweep(CONVEX, train, (test.features[7], 1), cfg)
    return train, test, cfg, result


class TestLoo:
    def test_records(self, small):
        train, _, _, result = small
        assert [r.train_index for r in result.records] == list(range(len(train)))
        for r in result.records:
            assert r.actual_delta == r.loo_test_loss - r.base_test_loss
        assert result.base_grad_norm < 1e-10
        assert sum(r.flipped for r in result.records) == 3

    def test_orientation(self, small):
        _, _, _, result = small
        assert result.spearman < 0
        assert result.spearman_oriented == -result.spearman

    def test_deterministic(self, small):
        train, test, cfg, result = small
        again = loo_sweep(CONVEX, train, (test.features[7], 1), cfg)
        assert loo_records_json(again) == loo_records_json(result)

    def test_csv(self, small, tmp_path):
        _, _, _, result = small
        result.write_csv(tmp_path / "loo.csv")
        rows = list(csv.DictReader(open(tmp_path / "loo.csv")))
        assert len(rows) == len(result.records)
        assert float(rows[0]["actual_delta"]) == result.records[0].actual_delta
        assert "spearman_oriented" in result.summary_json()

    def test_weightless_sample(self):
        base = make_synthetic(20, 2, 2.0, seed=4)
        far = LabeledDataset(np.array([[60.0, 0.0]]), [1], [1], [False], (0, 1), "train")
        train = _concat(base, far)
        test = make_synthetic(3, 2, 2.0, seed=5, split="test")
        result = loo_sweep(CONVEX, train, (test.features[0], 0), default_train_config("softmax_regression"))
        assert abs(result.records[-1].actual_delta) <= 1e-4

    def test_duplicated_sample_matters_less(self):
        base = make_synthetic(12, 2, 1.0, seed=8)
        test_point = (np.array([0.3, 0.2]), 0)
        cfg = default_train_config("softmax_regression")
        unique = loo_sweep(CONVEX, base, test_point, cfg)
        doubled = loo_sweep(CONVEX, _concat(base, base), test_point, cfg)
        j = int(np.argmax([abs(r.actual_delta) for r in unique.records]))
        assert abs(doubled.records[j].actual_delta) < abs(unique.records[j].actual_delta)

    def test_size_guard(self):
        big = make_synthetic(251, 2, 1.0, seed=0)
        with pytest.raises(SizeError):
            loo_sweep(CONVEX, big, (np.zeros(2), 0), default_train_config("softmax_regression"))
        with pytest.raises(ArgumentError):
            loo_sweep(CONVEX, make_synthetic(1, 2, 1.0, 0), (np.zeros(2), 0), default_train_config("softmax_regression"))


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
