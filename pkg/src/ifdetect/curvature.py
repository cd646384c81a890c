"""Damped curvature operators of the mean training loss and their inverse action."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ifdetect.blob import read_blob, write_blob
from ifdetect.data import LabeledDataset
from ifdetect.errors import ArgumentError, CapabilityError, NumericalError, SizeError
from ifdetect.model import ModelParameters, iter_per_sample_grads, last_layer_inputs, predict_proba

MODES = ("diag_fisher", "diag_exact", "lastlayer_full")
DEFAULT_DAMPING = 1e-3
MAX_LASTLAYER_PARAMS = 10_000
MAGIC = b"IFCV"


@dataclass(frozen=True)
class CurvatureOperator:
    """``H + damping * I`` for one of three curvature estimates.

    Diagonal modes hold the damped diagonal over all W parameters. The last-layer
    mode holds the undamped Hessian over the final layer's slice and a Cholesky
    factor of its damped version, computed once at construction.
    """

    mode: str
    damping: float
    n_samples_used: int
    diag_values: np.ndarray | None = None
    full_matrix: np.ndarray | None = None
    _factor: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ArgumentError(f"unknown curvature mode {self.mode!r}")
        if not self.damping > 0:
            raise ArgumentError("damping must be > 0")
        if self.mode == "lastlayer_full":
            h = np.array(self.full_matrix, dtype=np.float64)
            h.setflags(write=False)
            object.__setattr__(self, "full_matrix", h)
            try:
                factor = cho_factor(h + self.damping * np.eye(len(h)), lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"damped last-layer Hessian is not positive definite: {exc}") from exc
            object.__setattr__(self, "_factor", factor)
        else:
            d = np.array(self.diag_values, dtype=np.float64)
            if (d < self.damping).any():
                raise NumericalError("diagonal entries below the damping floor")
            d.setflags(write=False)
            object.__setattr__(self, "diag_values", d)

    @property
    def is_diagonal(self) -> bool:
        return self.mode != "lastlayer_full"

    @property
    def dim(self) -> int:
        return len(self.diag_values) if self.is_diagonal else len(self.full_matrix)

    def dense(self) -> np.ndarray:
        """The damped operator as a dense matrix (small instances only)."""
        if self.is_diagonal:
            return np.diag(self.diag_values)
        return self.full_matrix + self.damping * np.eye(self.dim)


def _check_dim(op: CurvatureOperator, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim not in (1, 2) or v.shape[-1] != op.dim:
        raise ArgumentError(f"vector of shape {v.shape} does not match operator dimension {op.dim}")
    return v


def apply_inverse(op: CurvatureOperator, v: np.ndarray) -> np.ndarray:
    """Solve ``(H + damping I) u = v``. A 2-D ``v`` is treated as a stack of row vectors."""
    v = _check_dim(op, v)
    if op.is_diagonal:
        return v / op.diag_values
    return cho_solve(op._factor, v.T).T


def apply(op: CurvatureOperator, v: np.ndarray) -> np.ndarray:
    """Forward action ``(H + damping I) v``."""
    v = _check_dim(op, v)
    if op.is_diagonal:
        return v * op.diag_values
    return v @ op.full_matrix + op.damping * v


# --------------------------------------------------------------------------- builders


def _check_damping(damping: float) -> None:
    if not damping > 0:
        raise ArgumentError("damping must be > 0")


def diag_fisher(params: ModelParameters, ds: LabeledDataset, damping: float = DEFAULT_DAMPING) -> CurvatureOperator:
    """Empirical Fisher diagonal: mean of squared per-sample gradients, plus damping."""
    _check_damping(damping)
    acc = np.zeros(params.n_params)
    for rows, g in iter_per_sample_grads(params, ds.features, ds.labels):
        bad = ~np.isfinite(g).all(axis=1)
        if bad.any():
            raise NumericalError(f"non-finite gradient for sample {rows.start + int(np.argmax(bad))}")
        acc += np.einsum("ij,ij->j", g, g)
    n = max(len(ds), 1)
    return CurvatureOperator("diag_fisher", damping, len(ds), diag_values=acc / n + damping)


def diag_exact(params: ModelParameters, ds: LabeledDataset, damping: float = DEFAULT_DAMPING) -> CurvatureOperator:
    """Exact Hessian diagonal of the mean cross-entropy (softmax regression only).

    Weight ``(c, f)``: mean of ``p_c (1 - p_c) x_f^2``; bias ``c``: mean of ``p_c (1 - p_c)``.
    """
    _check_damping(damping)
    if params.spec.kind != "softmax_regression":
        raise CapabilityError(
            f"diag_exact has a closed form only for softmax_regression, not {params.spec.kind}; use diag_fisher"
        )
    x = ds.features.reshape(len(ds), -1)
    p = predict_proba(params, ds.features)
    s = p * (1.0 - p)  # (n, C)
    n = max(len(ds), 1)
    w_part = (s.T @ (x * x)) / n
    b_part = s.sum(axis=0) / n
    diag = np.concatenate([w_part.ravel(), b_part])
    diag = np.maximum(diag, 0.0) + damping
    return CurvatureOperator("diag_exact", damping, len(ds), diag_values=diag)


def _slice_to_kron(n_classes: int, d: int) -> np.ndarray:
    """Index map from last-layer slice order (weights row-major, then bias) to (class, augmented feature)."""
    w = (np.arange(n_classes)[:, None] * (d + 1) + np.arange(d)[None, :]).ravel()
    b = np.arange(n_classes) * (d + 1) + d
    return np.concatenate([w, b])


def lastlayer_hessian(params: ModelParameters, ds: LabeledDataset) -> np.ndarray:
    """Undamped Gauss-Newton Hessian over the final layer, in slice order.

    ``mean_i (diag(p_i) - p_i p_i^T) kron (abar_i abar_i^T)`` with ``abar = (a, 1)``;
    exact for a linear-softmax last layer with its inputs held fixed.
    """
    c = params.spec.n_classes
    _, length = params.last_layer_slice
    if length > MAX_LASTLAYER_PARAMS:
        raise SizeError(f"last layer has {length} parameters; dense Hessian capped at {MAX_LASTLAYER_PARAMS}")
    acts, probs = last_layer_inputs(params, ds.features)
    n, d = acts.shape
    abar = np.concatenate([acts, np.ones((n, 1))], axis=1)
    h = np.empty((c * (d + 1), c * (d + 1)))
    for i in range(c):
        for j in range(i, c):
            m_ij = (probs[:, i] if i == j else 0.0) - probs[:, i] * probs[:, j]
            block = (abar * m_ij[:, None]).T @ abar / max(n, 1)
            h[i * (d + 1) : (i + 1) * (d + 1), j * (d + 1) : (j + 1) * (d + 1)] = block
            h[j * (d + 1) : (j + 1) * (d + 1), i * (d + 1) : (i + 1) * (d + 1)] = block.T
    k = _slice_to_kron(c, d)
    h = h[np.ix_(k, k)]
    return 0.5 * (h + h.T)


def lastlayer_full(params: ModelParameters, ds: LabeledDataset, damping: float = DEFAULT_DAMPING) -> CurvatureOperator:
    _check_damping(damping)
    return CurvatureOperator("lastlayer_full", damping, len(ds), full_matrix=lastlayer_hessian(params, ds))


BUILDERS = {"diag_fisher": diag_fisher, "diag_exact": diag_exact, "lastlayer_full": lastlayer_full}


def build(mode: str, params: ModelParameters, ds: LabeledDataset, damping: float = DEFAULT_DAMPING) -> CurvatureOperator:
    try:
        builder = BUILDERS[mode]
    except KeyError:
        raise ArgumentError(f"unknown curvature mode {mode!r}; choose from {MODES}") from None
    return builder(params, ds, damping)


# --------------------------------------------------------------------------- persistence


def save_operator(op: CurvatureOperator, path: str | Path) -> None:
    header = {"mode": op.mode, "damping": op.damping, "n_samples_used": op.n_samples_used, "dim": op.dim}
    if op.is_diagonal:
        payload = op.diag_values
    else:
        payload = op.full_matrix[np.tril_indices(op.dim)]
        header["packing"] = "lower_triangular_row_major"
    write_blob(path, MAGIC, header, payload)


def load_operator(path: str | Path) -> CurvatureOperator:
    header, payload = read_blob(path, MAGIC)
    if header["mode"] == "lastlayer_full":
        dim = header["dim"]
        h = np.zeros((dim, dim))
        h[np.tril_indices(dim)] = payload
        h = h + np.tril(h, -1).T
        return CurvatureOperator(header["mode"], header["damping"], header["n_samples_used"], full_matrix=h)
    return CurvatureOperator(header["mode"], header["damping"], header["n_samples_used"], diag_values=payload)
