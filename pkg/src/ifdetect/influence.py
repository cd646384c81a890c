"""Pairwise influence scores, their per-training-sample aggregate, and top-k rankings.

A score is ``-g_test . (H + damping I)^{-1} g_train``: the first-order change in the
test loss when the training sample is upweighted. Positive scores mark harmful
training samples, negative ones helpful samples.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ifdetect.blob import read_blob, write_blob
from ifdetect.curvature import CurvatureOperator, apply_inverse
from ifdetect.data import LabeledDataset
from ifdetect.errors import ArgumentError, NumericalError
from ifdetect.model import ModelParameters, iter_per_sample_grads, last_layer_grads, per_sample_grads

AGGREGATIONS = ("mean", "sum")
MAGIC = b"IFMX"


@dataclass(frozen=True)
class InfluenceMatrix:
    scores: np.ndarray  # (n_test_rows, n_train)
    test_indices: tuple
    train_flip_mask: np.ndarray
    mode: str
    damping: float

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] != len(self.test_indices):
            raise ArgumentError("score rows must match test_indices")
        if scores.shape[1] != len(self.train_flip_mask):
            raise ArgumentError("score columns must match the training set")
        if not np.isfinite(scores).all():
            raise NumericalError("non-finite influence score")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "test_indices", tuple(int(i) for i in self.test_indices))
        object.__setattr__(self, "train_flip_mask", np.asarray(self.train_flip_mask, dtype=bool))

    @property
    def n_train(self) -> int:
        return self.scores.shape[1]

    def row(self, test_index: int) -> np.ndarray:
        try:
            return self.scores[self.test_indices.index(test_index)]
        except ValueError:
            raise ArgumentError(f"test index {test_index} was not scored") from None


@dataclass(frozen=True)
class InfluenceSummary:
    avg_score: np.ndarray
    rank_desc: np.ndarray
    aggregation: str = "mean"


def influence_pair(g_test, g_train, op: CurvatureOperator) -> float:
    """``-<g_test, apply_inverse(op, g_train)>``."""
    gt = np.asarray(getattr(g_test, "values", g_test), dtype=np.float64)
    gj = np.asarray(getattr(g_train, "values", g_train), dtype=np.float64)
    if gt.shape != gj.shape or gt.ndim != 1:
        raise ArgumentError(f"gradient shapes differ: {gt.shape} vs {gj.shape}")
    return -float(gt @ apply_inverse(op, gj))


def _gradients(params: ModelParameters, op: CurvatureOperator, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if op.is_diagonal:
        return per_sample_grads(params, x, y)
    return last_layer_grads(params, x, y)[0]


def _check_domain(params: ModelParameters, op: CurvatureOperator) -> None:
    want = params.n_params if op.is_diagonal else params.last_layer_slice[1]
    if op.dim != want:
        raise ArgumentError(f"operator dimension {op.dim} does not match model domain {want}")


def influence_matrix(
    params: ModelParameters,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    test_indices: Sequence[int],
    op: CurvatureOperator,
    workers: int = 1,
    chunk: int = 256,
) -> InfluenceMatrix:
    """Scores for every (selected test row, training column) pair.

    Test gradients are transformed by the inverse operator once; training
    gradients are streamed in column shards and never stored whole.
    """
    test_indices = [int(i) for i in test_indices]
    if not test_indices:
        raise ArgumentError("no test points to attribute")
    if min(test_indices) < 0 or max(test_indices) >= len(test_ds):
        raise ArgumentError("test index out of range")
    _check_domain(params, op)
    rows = np.asarray(test_indices)
    g_test = _gradients(params, op, test_ds.features[rows], test_ds.true_labels[rows])
    u = apply_inverse(op, g_test)  # (m, dim)

    n = len(train_ds)
    scores = np.empty((len(rows), n))
    x, y = train_ds.features, train_ds.labels

    if not op.is_diagonal:
        g_train = last_layer_grads(params, x, y)[0]

        def shard(sl: slice) -> None:
            scores[:, sl] = -(u @ g_train[sl].T)

    else:

        def shard(sl: slice) -> None:
            for sub, g in iter_per_sample_grads(params, x[sl], y[sl], chunk=chunk):
                cols = slice(sl.start + sub.start, sl.start + sub.stop)
                scores[:, cols] = -(u @ g.T)

    bounds = np.linspace(0, n, max(1, workers) + 1).astype(int)
    shards = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(shard, shards))
    else:
        for sl in shards:
            shard(sl)
    return InfluenceMatrix(scores, tuple(test_indices), train_ds.flip_mask, op.mode, op.damping)


def rank_descending(values: np.ndarray) -> np.ndarray:
    """Indices sorted by value descending, ties by index ascending."""
    idx = np.arange(len(values))
    return np.lexsort((idx, -values))


def summarize(m: InfluenceMatrix, aggregation: str = "mean") -> InfluenceSummary:
    if aggregation not in AGGREGATIONS:
        raise ArgumentError(f"aggregation must be one of {AGGREGATIONS}")
    avg = m.scores.mean(axis=0) if aggregation == "mean" else m.scores.sum(axis=0)
    return InfluenceSummary(avg, rank_descending(avg), aggregation)


def top_k(m: InfluenceMatrix, test_index: int, k: int):
    """The ``k`` most harmful (largest, descending) and most helpful (smallest, ascending) columns."""
    if k < 1:
        raise ArgumentError("k must be >= 1")
    row = m.row(test_index)
    k = min(k, len(row))
    idx = np.arange(len(row))
    harmful = np.lexsort((idx, -row))[:k]
    helpful = np.lexsort((idx, row))[:k]
    return (
        [(int(j), float(row[j])) for j in harmful],
        [(int(j), float(row[j])) for j in helpful],
    )


# --------------------------------------------------------------------------- persistence


def save_matrix(m: InfluenceMatrix, path: str | Path) -> None:
    header = {
        "n_test": len(m.test_indices),
        "n_train": m.n_train,
        "mode": m.mode,
        "damping": m.damping,
        "test_indices": list(m.test_indices),
        "train_flip_mask": [int(b) for b in m.train_flip_mask],
    }
    write_blob(path, MAGIC, header, m.scores)


def load_matrix(path: str | Path) -> InfluenceMatrix:
    header, payload = read_blob(path, MAGIC)
    scores = payload.reshape(header["n_test"], header["n_train"])
    return InfluenceMatrix(scores, tuple(header["test_indices"]), np.array(header["train_flip_mask"], dtype=bool), header["mode"], header["damping"])


def write_summary_csv(summary: InfluenceSummary, flip_mask: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train_index", "avg_score", "flipped"])
        for j, (s, f) in enumerate(zip(summary.avg_score, flip_mask)):
            w.writerow([j, repr(float(s)), int(f)])


def read_summary_csv(path: str | Path, aggregation: str = "mean") -> tuple[InfluenceSummary, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    avg = np.array([float(r["avg_score"]) for r in rows])
    mask = np.array([r["flipped"] == "1" for r in rows])
    return InfluenceSummary(avg, rank_descending(avg), aggregation), mask
