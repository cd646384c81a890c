"""Ground-truth checks: brute-force leave-one-out retraining and finite differences."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ifdetect import curvature
from ifdetect.data import LabeledDataset
from ifdetect.errors import ArgumentError, CapabilityError, OracleError, SizeError
from ifdetect.influence import influence_pair
from ifdetect.model import (
    ArchitectureSpec,
    ModelParameters,
    grad,
    grad_last_layer,
    loss,
    losses,
    mean_loss_and_grad,
)
from ifdetect.train import TrainConfig, fit

log = logging.getLogger(__name__)

LOO_MAX_SAMPLES = 500
STATIONARY_TOL = 1e-10


@dataclass(frozen=True)
class LooRecord:
    train_index: int
    base_test_loss: float
    loo_test_loss: float
    actual_delta: float
    predicted_score: float
    flipped: bool = False


@dataclass
class LooResult:
    records: list
    spearman: float
    spearman_oriented: float
    top_decile_flipped_fraction: float
    base_grad_norm: float
    mode: str
    damping: float

    # Removing sample j is upweighting by roughly -1/n, so the loss change from
    # removal is about -score/n: influence and actual_delta rank in opposite order.
    orientation = "actual_delta = loo_loss - base_loss ~ -predicted_score / n; spearman_oriented uses -actual_delta"

    def summary_json(self) -> dict:
        return {
            "n": len(self.records),
            "spearman": self.spearman,
            "spearman_oriented": self.spearman_oriented,
            "top_decile_flipped_fraction": self.top_decile_flipped_fraction,
            "base_grad_norm": self.base_grad_norm,
            "mode": self.mode,
            "damping": self.damping,
            "orientation": self.orientation,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["train_index", "actual_delta", "predicted_score", "flipped"])
            for r in self.records:
                w.writerow([r.train_index, repr(r.actual_delta), repr(r.predicted_score), int(r.flipped)])


# --------------------------------------------------------------------------- stationarity


def minimize_full_batch(
    params: ModelParameters, ds: LabeledDataset, tol: float = STATIONARY_TOL, max_iter: int = 200
) -> tuple[ModelParameters, float]:
    """Drive the full-batch mean-loss gradient norm below ``tol``.

    Softmax regression takes damped-free Newton steps on its exact Hessian (the
    null direction from softmax shift invariance is handled by a least-squares
    solve); other models fall back to gradient descent with backtracking.
    Returns the parameters and the final gradient norm.
    """
    x, y = ds.features, ds.labels
    theta = params.values.copy()
    f, g = mean_loss_and_grad(params, x, y)
    newton = params.spec.kind == "softmax_regression"
    step_size = 1.0
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if not np.isfinite(gnorm):
            raise OracleError("non-finite gradient during refinement")
        if gnorm < tol:
            break
        if newton:
            h = curvature.lastlayer_hessian(params.with_values(theta), ds)
            direction = -np.linalg.lstsq(h, g, rcond=1e-12)[0]
            if direction @ g >= 0:
                direction = -g
            t = 1.0
        else:
            direction, t = -g, step_size
        while True:
            cand = theta + t * direction
            f_new, g_new = mean_loss_and_grad(params.with_values(cand), x, y)
            if f_new <= f + 1e-4 * t * (g @ direction) or t < 1e-12:
                break
            t *= 0.5
        if not newton:
            step_size = min(t * 2.0, 1e3)
        if f_new > f and t < 1e-12:
            break
        theta, f, g = cand, f_new, g_new
    return params.with_values(theta), float(np.linalg.norm(g))


# --------------------------------------------------------------------------- LOO


def _domain_grad(params: ModelParameters, op: curvature.CurvatureOperator, x, y) -> np.ndarray:
    if op.is_diagonal:
        return grad(params, x, y).values
    return grad_last_layer(params, x, y)[0].values


def loo_sweep(
    spec: ArchitectureSpec,
    train_ds: LabeledDataset,
    test_point: tuple,
    cfg: TrainConfig,
    op_builder: str = "lastlayer_full",
    damping: float = curvature.DEFAULT_DAMPING,
    workers: int = 1,
    tol: float = STATIONARY_TOL,
    max_iter: int = 200,
    init: ModelParameters | None = None,
) -> LooResult:
    """Retrain once per left-out sample and compare the test-loss change with influence.

    The full-data model is trained with ``cfg`` and then driven to stationarity on
    all samples; each leave-one-out model warm-starts from it under the same
    stopping rule (gradient norm below ``tol``) and iteration budget.
    """
    n = len(train_ds)
    if n > LOO_MAX_SAMPLES:
        raise SizeError(f"leave-one-out capped at {LOO_MAX_SAMPLES} samples, got {n}")
    if n < 3:
        raise ArgumentError("leave-one-out needs at least three samples")
    x_t, y_t = test_point
    base = fit(spec, train_ds, cfg, init=init).final_params
    base, gnorm = minimize_full_batch(base, train_ds, tol, max_iter)
    base_loss = loss(base, x_t, y_t)
    op = curvature.build(op_builder, base, train_ds, damping)
    g_test = _domain_grad(base, op, x_t, y_t)

    def one(j: int) -> LooRecord:
        keep = np.delete(np.arange(n), j)
        try:
            refit, _ = minimize_full_batch(base, train_ds.subset(keep), tol, max_iter)
        except (OracleError, ArithmeticError) as exc:
            raise OracleError(f"leave-one-out retrain for sample {j} failed: {exc}") from exc
        loo = loss(refit, x_t, y_t)
        if not np.isfinite(loo):
            raise OracleError(f"leave-one-out retrain for sample {j} diverged")
        g_j = _domain_grad(base, op, train_ds.features[j], train_ds.labels[j])
        return LooRecord(
            train_index=j,
            base_test_loss=base_loss,
            loo_test_loss=loo,
            actual_delta=loo - base_loss,
            predicted_score=influence_pair(g_test, g_j, op),
            flipped=bool(train_ds.flip_mask[j]),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(n)))
    else:
        records = [one(j) for j in range(n)]

    pred = np.array([r.predicted_score for r in records])
    delta = np.array([r.actual_delta for r in records])
    rho = float(spearmanr(pred, delta).statistic)
    k = max(1, n // 10)
    # most harmful by ground truth: removal lowers the test loss the most
    top = np.lexsort((np.arange(n), delta))[:k]
    frac = float(np.mean([records[j].flipped for j in top]))
    return LooResult(records, rho, -rho, frac, gnorm, op.mode, op.damping)


def spearman(a, b) -> float:
    return float(spearmanr(a, b).statistic)


# --------------------------------------------------------------------------- finite differences


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float) -> np.ndarray:
    """Relative error, falling back to absolute error where both magnitudes sit below ``abs_floor``."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.abs(analytic - numeric) / np.maximum(scale, 1e-12)
    return np.where(scale < abs_floor, np.abs(analytic - numeric), rel)


def fd_gradient_check(
    spec: ArchitectureSpec,
    params: ModelParameters,
    sample: tuple,
    h: float = 1e-4,
    n_coords: int = 10,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> float:
    """Worst error of ``grad`` against central differences of ``loss``.

    All coordinates are checked when W <= 200, otherwise a seeded subset of
    ``max(n_coords, 10)``.
    """
    if not h > 0:
        raise ArgumentError("h must be > 0")
    if params.spec != spec:
        raise ArgumentError("parameters do not match the architecture")
    x, y = sample
    g = grad(params, x, y).values
    w = params.n_params
    if w <= 200:
        coords = np.arange(w)
    else:
        coords = np.random.default_rng(seed).choice(w, size=min(w, max(n_coords, 10)), replace=False)
    numeric = np.empty(len(coords))
    base = params.values
    for i, c in enumerate(coords):
        e = np.zeros(w)
        e[c] = h
        numeric[i] = (loss(params.with_values(base + e), x, y) - loss(params.with_values(base - e), x, y)) / (2 * h)
    return float(_rel_err(g[coords], numeric, abs_floor).max())


def _mean_loss(params: ModelParameters, ds: LabeledDataset) -> float:
    return float(losses(params, ds.features, ds.labels).mean())


def fd_diag_hessian(params: ModelParameters, ds: LabeledDataset, h: float = 1e-3, coords=None) -> np.ndarray:
    """Second central differences of the mean loss along each coordinate."""
    w = params.n_params
    coords = np.arange(w) if coords is None else np.asarray(coords)
    base = params.values
    f0 = _mean_loss(params, ds)
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        e = np.zeros(w)
        e[c] = h
        out[i] = (_mean_loss(params.with_values(base + e), ds) - 2 * f0 + _mean_loss(params.with_values(base - e), ds)) / h**2
    return out


def fd_lastlayer_hessian(params: ModelParameters, ds: LabeledDataset, h: float = 1e-3) -> np.ndarray:
    """Full finite-difference Hessian of the mean loss over the last-layer slice."""
    off, length = params.last_layer_slice
    base = params.values

    def f(da: int, sa: float, db: int, sb: float) -> float:
        v = base.copy()
        v[off + da] += sa * h
        v[off + db] += sb * h
        return _mean_loss(params.with_values(v), ds)

    hess = np.empty((length, length))
    for a in range(length):
        for b in range(a, length):
            val = (f(a, 1, b, 1) - f(a, 1, b, -1) - f(a, -1, b, 1) + f(a, -1, b, -1)) / (4 * h * h)
            hess[a, b] = hess[b, a] = val
    return hess


def fd_hessian_check(
    spec: ArchitectureSpec,
    params: ModelParameters,
    ds: LabeledDataset,
    mode: str,
    h: float = 1e-3,
    abs_floor: float = 1e-8,
) -> float:
    """Compare an undamped curvature builder with finite differences of the mean loss.

    ``diag_exact``: worst relative error over all W diagonal entries (W <= 2000).
    ``lastlayer_full``: worst absolute error over the full last-layer block (<= 200 params).
    ``diag_fisher``: worst relative deviation from the true diagonal; a measurement,
    since the empirical Fisher is an approximation by construction.
    """
    if params.spec != spec:
        raise ArgumentError("parameters do not match the architecture")
    tiny = 1e-300  # builders add damping; undo it with a negligible value
    if mode in ("diag_exact", "diag_fisher"):
        if params.n_params > 2000:
            raise CapabilityError("diagonal finite-difference check limited to W <= 2000")
        op = curvature.build(mode, params, ds, damping=tiny)
        analytic = op.diag_values - tiny
        return float(_rel_err(analytic, fd_diag_hessian(params, ds, h), abs_floor).max())
    if mode == "lastlayer_full":
        if params.last_layer_slice[1] > 200:
            raise CapabilityError("last-layer finite-difference check limited to 200 parameters")
        analytic = curvature.lastlayer_hessian(params, ds)
        return float(np.abs(analytic - fd_lastlayer_hessian(params, ds, h)).max())
    raise CapabilityError(f"no finite-difference check for mode {mode!r}")


def loo_records_json(result: LooResult) -> list[dict]:
    return [asdict(r) for r in result.records]
