"""Labeled datasets: IDX ingestion, class restriction, label flipping, synthetic blobs."""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ifdetect.errors import ArgumentError, ConsistencyError, FormatError, UsageError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SPLITS = ("train", "test")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledDataset:
    """Features plus observed labels, ground-truth labels and the injected-noise mask.

    ``labels`` index into ``class_names``; ``flip_mask[i]`` is true exactly when
    ``labels[i] != true_labels[i]``. Image features arrive scaled to [0, 1] by
    :func:`load_idx`; synthetic features are unbounded Gaussian draws.
    """

    features: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    flip_mask: np.ndarray
    class_names: tuple
    split_tag: str

    def __post_init__(self) -> None:
        feats = _frozen(np.asarray(self.features, dtype=np.float64))
        labels = _frozen(np.asarray(self.labels, dtype=np.int64))
        true_labels = _frozen(np.asarray(self.true_labels, dtype=np.int64))
        mask = _frozen(np.asarray(self.flip_mask, dtype=bool))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "true_labels", true_labels)
        object.__setattr__(self, "flip_mask", mask)
        object.__setattr__(self, "class_names", tuple(self.class_names))

        n = len(feats)
        if not (len(labels) == len(true_labels) == len(mask) == n):
            raise ConsistencyError(
                f"length mismatch: features={n} labels={len(labels)} "
                f"true_labels={len(true_labels)} flip_mask={len(mask)}"
            )
        if self.split_tag not in SPLITS:
            raise ArgumentError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        k = len(self.class_names)
        for name, arr in (("labels", labels), ("true_labels", true_labels)):
            if n and (arr.min() < 0 or arr.max() >= k):
                raise ConsistencyError(f"{name} out of range for {k} classes")
        if not np.array_equal(mask, labels != true_labels):
            raise ConsistencyError("flip_mask disagrees with labels != true_labels")
        if n and not np.isfinite(feats).all():
            raise ConsistencyError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def class_index(self, name: Any) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ArgumentError(f"unknown class {name!r}; have {list(self.class_names)}") from None

    def subset(self, idx: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.features[idx],
            self.labels[idx],
            self.true_labels[idx],
            self.flip_mask[idx],
            self.class_names,
            self.split_tag,
        )


@dataclass(frozen=True)
class FlipSpec:
    source_class: Any
    target_class: Any
    rate: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.source_class == self.target_class:
            raise ArgumentError("source_class and target_class must differ")
        if not 0.0 <= float(self.rate) <= 1.0:
            raise ArgumentError(f"rate must lie in [0, 1], got {self.rate}")
        if int(self.seed) < 0:
            raise ArgumentError("seed must be unsigned")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# --------------------------------------------------------------------------- IDX


def _open(path: Path, mode: str):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def _read_idx(path: Path, magic: int) -> tuple[list[int], bytes]:
    path = Path(path)
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = list(struct.unpack(">" + "I" * ndim, raw[4:header]))
    body = raw[header:]
    if len(body) != int(np.prod(dims)):
        raise FormatError(f"{path}: body has {len(body)} bytes, header declares {int(np.prod(dims))}")
    return dims, body


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train") -> LabeledDataset:
    """Load an IDX image/label pair; pixels are scaled by 1/255."""
    idims, ibody = _read_idx(Path(images_path), IMAGES_MAGIC)
    ldims, lbody = _read_idx(Path(labels_path), LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise ConsistencyError(
            f"item counts differ: {images_path} has {idims[0]}, {labels_path} has {ldims[0]}"
        )
    n, rows, cols = idims
    pixels = np.frombuffer(ibody, dtype=np.uint8).reshape(n, rows, cols)
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    n_classes = max(10, int(labels.max()) + 1) if n else 10
    return LabeledDataset(
        features=pixels / 255.0,
        labels=labels,
        true_labels=labels.copy(),
        flip_mask=np.zeros(n, dtype=bool),
        class_names=tuple(range(n_classes)),
        split_tag=split,
    )


def write_idx(ds: LabeledDataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write features (rescaled to bytes) and observed labels as class identifiers."""
    if ds.features.ndim != 3:
        raise ArgumentError("IDX images need 2-D samples")
    n, rows, cols = ds.features.shape
    pixels = np.rint(ds.features * 255.0).astype(np.uint8)
    names = np.asarray(ds.class_names, dtype=np.int64)
    labels = names[ds.labels].astype(np.uint8)
    with _open(Path(images_path), "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with _open(Path(labels_path), "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(labels.tobytes())


# --------------------------------------------------------------------------- transforms


def restrict_classes(ds: LabeledDataset, keep: Sequence[Any]) -> LabeledDataset:
    """Keep samples whose true label is in ``keep``; labels re-indexed in ``keep`` order."""
    keep = list(keep)
    if not keep:
        raise ArgumentError("keep must be non-empty")
    if len(set(keep)) != len(keep):
        raise ArgumentError("keep has duplicates")
    old_idx = [ds.class_index(c) for c in keep]
    remap = np.full(len(ds.class_names), -1, dtype=np.int64)
    remap[old_idx] = np.arange(len(keep))
    rows = np.flatnonzero(remap[ds.true_labels] >= 0)
    new_labels = remap[ds.labels[rows]]
    if (new_labels < 0).any():
        raise ConsistencyError("a kept sample carries an observed label outside keep")
    return LabeledDataset(
        features=ds.features[rows],
        labels=new_labels,
        true_labels=remap[ds.true_labels[rows]],
        flip_mask=ds.flip_mask[rows],
        class_names=tuple(keep),
        split_tag=ds.split_tag,
    )


def fisher_yates(n: int, seed: int) -> np.ndarray:
    """Seeded in-place Fisher-Yates permutation of ``range(n)``."""
    rng = np.random.default_rng(seed)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def flip_labels(ds: LabeledDataset, spec: FlipSpec) -> LabeledDataset:
    """Relabel ``round(rate * n_source)`` source-class samples as the target class."""
    if ds.split_tag != "train":
        raise UsageError("label flips are only injected into a train split")
    src = ds.class_index(spec.source_class)
    dst = ds.class_index(spec.target_class)
    candidates = np.flatnonzero(ds.true_labels == src)
    n_flip = round_half_up(float(spec.rate) * len(candidates))
    chosen = candidates[fisher_yates(len(candidates), int(spec.seed))[:n_flip]]
    labels = ds.labels.copy()
    labels[chosen] = dst
    return LabeledDataset(
        features=ds.features,
        labels=labels,
        true_labels=ds.true_labels,
        flip_mask=labels != ds.true_labels,
        class_names=ds.class_names,
        split_tag=ds.split_tag,
    )


def make_synthetic(
    n_per_class: int, dim: int, separation: float, seed: int, split: str = "train"
) -> LabeledDataset:
    """Two unit-covariance Gaussian blobs at +/- separation/2 on the first axis.

    Features are the raw Gaussian draws; only image data is pixel-normalized.
    """
    if n_per_class < 1 or dim < 1:
        raise ArgumentError("n_per_class and dim must be >= 1")
    if not separation > 0:
        raise ArgumentError("separation must be > 0")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2 * n_per_class, dim))
    x[:n_per_class, 0] -= separation / 2.0
    x[n_per_class:, 0] += separation / 2.0
    labels = np.repeat(np.arange(2), n_per_class)
    return LabeledDataset(
        features=x,
        labels=labels,
        true_labels=labels.copy(),
        flip_mask=np.zeros(len(labels), dtype=bool),
        class_names=(0, 1),
        split_tag=split,
    )


# --------------------------------------------------------------------------- persistence


@dataclass
class DatasetManifest:
    split: str
    n: int
    classes: list
    flip_count: int
    seed: int | None = None
    flip_spec: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        extra = out.pop("extra")
        out.update(extra)
        return out


def manifest_for(ds: LabeledDataset, flip: FlipSpec | None = None, seed: int | None = None, **extra) -> DatasetManifest:
    return DatasetManifest(
        split=ds.split_tag,
        n=len(ds),
        classes=[c for c in ds.class_names],
        flip_count=int(ds.flip_mask.sum()),
        seed=seed,
        flip_spec=asdict(flip) if flip is not None else None,
        extra=extra,
    )


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Persist as npz. Features in {k/255} are stored as bytes (lossless) to save space."""
    path = Path(path)
    as_bytes = ds.features * 255.0
    byte_exact = len(ds) > 0 and np.array_equal(as_bytes, np.rint(as_bytes))
    payload = {
        "labels": ds.labels,
        "true_labels": ds.true_labels,
        "flip_mask": ds.flip_mask,
        "class_names": np.asarray(json.dumps(list(ds.class_names))),
        "split_tag": np.asarray(ds.split_tag),
    }
    if byte_exact:
        payload["pixels"] = np.rint(as_bytes).astype(np.uint8)
    else:
        payload["features"] = ds.features
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_dataset(path: str | Path) -> LabeledDataset:
    with np.load(Path(path), allow_pickle=False) as z:
        feats = z["pixels"] / 255.0 if "pixels" in z.files else z["features"]
        return LabeledDataset(
            features=feats,
            labels=z["labels"],
            true_labels=z["true_labels"],
            flip_mask=z["flip_mask"],
            class_names=tuple(json.loads(str(z["class_names"]))),
            split_tag=str(z["split_tag"]),
        )
