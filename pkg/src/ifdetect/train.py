"""Mini-batch training with early stopping, and test-set diagnostics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ifdetect.data import LabeledDataset, round_half_up
from ifdetect.errors import ArgumentError, NumericalError, TrainingError, UsageError
from ifdetect.model import (
    ArchitectureSpec,
    ModelParameters,
    init_params,
    losses,
    mean_loss_and_grad,
    predict_proba,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 20
    early_stop_patience: int = 3
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ArgumentError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ArgumentError("max_epochs must be >= 1")
        if self.early_stop_patience < 0:
            raise ArgumentError("early_stop_patience must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ArgumentError("val_fraction must lie in (0, 1)")


def default_train_config(kind: str, **overrides) -> TrainConfig:
    """sgd at 0.1 for the convex model, adam at 1e-3 otherwise."""
    base = {"optimizer": "sgd", "learning_rate": 0.1} if kind == "softmax_regression" else {}
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainReport:
    final_params: ModelParameters
    epochs_run: int
    train_loss_curve: list = field(default_factory=list)
    val_loss_curve: list = field(default_factory=list)
    test_accuracy: float | None = None
    test_loss: float | None = None
    grad_norm_at_end: float = 0.0
    best_epoch: int = 0

    def to_json(self) -> dict:
        return {
            "arch": self.final_params.spec.to_dict(),
            "n_params": self.final_params.n_params,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "train_loss_curve": self.train_loss_curve,
            "val_loss_curve": self.val_loss_curve,
            "test_accuracy": self.test_accuracy,
            "test_loss": self.test_loss,
            "grad_norm_at_end": self.grad_norm_at_end,
        }

    def write_curves(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss_curve, self.val_loss_curve), start=1):
                w.writerow([i, repr(tr), repr(va)])


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        return theta - self.lr * g


class _Adam:
    def __init__(self, lr: float, n: int, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """The last ``val_fraction`` of a seeded shuffle is held out for validation."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = min(max(round_half_up(val_fraction * n), 1), n - 1)
    return perm[: n - n_val], perm[n - n_val :]


def evaluate(params: ModelParameters, ds: LabeledDataset) -> dict:
    """Mean loss and accuracy against the ground-truth labels."""
    if len(ds) == 0:
        return {"loss": 0.0, "accuracy": 0.0}
    probs = predict_proba(params, ds.features)
    acc = float((probs.argmax(axis=1) == ds.true_labels).mean())
    return {"loss": float(losses(params, ds.features, ds.true_labels).mean()), "accuracy": acc}


def fit(
    spec: ArchitectureSpec,
    ds: LabeledDataset,
    cfg: TrainConfig,
    test_ds: LabeledDataset | None = None,
    init: ModelParameters | None = None,
) -> TrainReport:
    """Train on the observed labels and return the best-validation checkpoint."""
    if ds.split_tag != "train":
        raise UsageError("fit needs a train split")
    if len(ds) < 2:
        raise ArgumentError("need at least two samples to carve out a validation split")
    params = init if init is not None else init_params(spec, cfg.seed)
    if params.spec != spec:
        raise ArgumentError("init parameters do not match the architecture")
    rng = np.random.default_rng(cfg.seed)
    tr_idx, va_idx = split_train_val(len(ds), cfg.val_fraction, cfg.seed)
    x, y = ds.features, ds.labels
    x_va, y_va = x[va_idx], y[va_idx]
    opt = _Adam(cfg.learning_rate, params.n_params) if cfg.optimizer == "adam" else _Sgd(cfg.learning_rate)

    theta = params.values.copy()
    best_theta, best_val, best_epoch = theta.copy(), np.inf, 0
    train_curve, val_curve = [], []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = tr_idx[rng.permutation(len(tr_idx))]
        total = 0.0
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                cur = params.with_values(theta)
                batch_loss, g = mean_loss_and_grad(cur, x[batch], y[batch])
                if not np.isfinite(batch_loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                total += batch_loss * len(batch)
                theta = opt.step(theta, g)
            val = float(losses(params.with_values(theta), x_va, y_va).mean())
        except NumericalError as exc:
            if isinstance(exc, TrainingError):
                raise
            raise TrainingError(f"divergence at epoch {epoch}: {exc}") from exc
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        train_curve.append(total / len(order))
        val_curve.append(val)
        log.debug("epoch %d train %.5f val %.5f", epoch, train_curve[-1], val)
        if val < best_val:
            best_val, best_theta, best_epoch, stale = val, theta.copy(), epoch, 0
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                break

    final = params.with_values(best_theta)
    _, g_full = mean_loss_and_grad(final, x, y)
    report = TrainReport(
        final_params=final,
        epochs_run=len(train_curve),
        train_loss_curve=train_curve,
        val_loss_curve=val_curve,
        grad_norm_at_end=float(np.linalg.norm(g_full)),
        best_epoch=best_epoch,
    )
    if test_ds is not None:
        ev = evaluate(final, test_ds)
        report.test_accuracy, report.test_loss = ev["accuracy"], ev["loss"]
    return report


def misclassified_test_set(params: ModelParameters, test_ds: LabeledDataset) -> list[int]:
    """Ascending indices whose argmax prediction (ties to the lower class) misses the true label."""
    if test_ds.split_tag != "test":
        raise UsageError("misclassified_test_set needs a test split")
    if len(test_ds) == 0:
        return []
    pred = predict_proba(params, test_ds.features).argmax(axis=1)
    return [int(i) for i in np.flatnonzero(pred != test_ds.true_labels)]
