"""Run configuration: a YAML file resolved into nested dataclasses.

Every knob that changes a number lives here. Loading fills defaults, so the
resolved form is complete; its canonical JSON is what gets hashed and echoed
into reports.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import yaml

from ifdetect.blob import canonical_json, sha256_bytes
from ifdetect.curvature import MODES
from ifdetect.data import FlipSpec
from ifdetect.errors import ArgumentError, ConfigError
from ifdetect.model.core import KINDS
from ifdetect.train import TrainConfig

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # "mnist_idx" or "synthetic"
    root: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_per_class: int = 50
    n_test_per_class: int = 50
    dim: int = 2
    separation: float = 2.0

    def validate(self, path: str) -> None:
        if self.kind not in ("mnist_idx", "synthetic"):
            raise ConfigError(f"{path}.kind: expected 'mnist_idx' or 'synthetic', got {self.kind!r}")
        if self.kind == "synthetic":
            for name in ("n_per_class", "n_test_per_class", "dim"):
                if getattr(self, name) < 1:
                    raise ConfigError(f"{path}.{name}: must be >= 1")
            if not self.separation > 0:
                raise ConfigError(f"{path}.separation: must be > 0")
            return
        for key, default in MNIST_FILES.items():
            if getattr(self, key) is None:
                if self.root is None:
                    raise ConfigError(f"{path}.{key}: required (or set {path}.root)")
                setattr(self, key, str(Path(self.root) / default))

    def idx_paths(self) -> dict[str, Path]:
        return {key: Path(getattr(self, key)) for key in MNIST_FILES}


@dataclass
class FlipSection:
    source_class: Any = 1
    target_class: Any = 0
    rate: float = 0.1

    def validate(self, path: str) -> None:
        if self.source_class == self.target_class:
            raise ConfigError(f"{path}.target_class: must differ from source_class")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"{path}.rate: must lie in [0, 1], got {self.rate}")


@dataclass
class ArchSection:
    kind: str = "softmax_regression"
    hidden_width: int | None = None
    conv_channels: list | None = None

    def validate(self, path: str) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"{path}.kind: expected one of {KINDS}, got {self.kind!r}")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ConfigError(f"{path}.hidden_width: must be >= 1")
        if self.conv_channels is not None and (len(self.conv_channels) != 3 or min(self.conv_channels) < 1):
            raise ConfigError(f"{path}.conv_channels: need three positive counts")


@dataclass
class TrainSection:
    optimizer: str | None = None
    learning_rate: float | None = None
    batch_size: int = 64
    max_epochs: int = 20
    early_stop_patience: int = 3
    val_fraction: float = 0.1


@dataclass
class CurvatureSection:
    mode: str | None = None  # resolved from the architecture when left empty
    damping: float = 1e-3

    def validate(self, path: str) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"{path}.mode: expected one of {MODES}, got {self.mode!r}")
        if not self.damping > 0:
            raise ConfigError(f"{path}.damping: must be > 0")


@dataclass
class SweepSection:
    n_points: int = 201
    include_zero: bool = True

    def validate(self, path: str) -> None:
        if self.n_points < 2:
            raise ConfigError(f"{path}.n_points: must be >= 2")


@dataclass
class ReportSection:
    top_k: int = 10
    n_test_points: int = 5

    def validate(self, path: str) -> None:
        if self.top_k < 1 or self.n_test_points < 0:
            raise ConfigError(f"{path}: top_k must be >= 1 and n_test_points >= 0")


@dataclass
class OracleSection:
    test_index: int | None = None  # default: first misclassified test point
    tol: float = 1e-10
    max_iter: int = 200


@dataclass
class CheckSection:
    """Targets enforced by ``all --check``."""

    min_recall: float = 0.8
    min_gap_se: float = 3.0


@dataclass
class SeedSection:
    data: int = 0
    init: int = 0
    train: int = 0

    def validate(self, path: str) -> None:
        for name in ("data", "init", "train"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}.{name}: seeds are unsigned")


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    classes_kept: list | None = None
    flip: FlipSection | None = None
    arch: ArchSection = field(default_factory=ArchSection)
    train: TrainSection = field(default_factory=TrainSection)
    curvature: CurvatureSection = field(default_factory=CurvatureSection)
    aggregation: str = "mean"
    sweep: SweepSection = field(default_factory=SweepSection)
    budget: float = 1.0
    seeds: SeedSection = field(default_factory=SeedSection)
    report: ReportSection = field(default_factory=ReportSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    check: CheckSection = field(default_factory=CheckSection)

    def resolve(self) -> "RunConfig":
        """Fill architecture-dependent defaults and validate every section."""
        self.dataset.validate("dataset")
        if self.flip is not None:
            self.flip.validate("flip")
        self.arch.validate("arch")
        if self.train.optimizer is None:
            self.train.optimizer = "sgd" if self.arch.kind == "softmax_regression" else "adam"
        if self.train.learning_rate is None:
            self.train.learning_rate = 0.1 if self.train.optimizer == "sgd" else 1e-3
        if self.curvature.mode is None:
            self.curvature.mode = "diag_exact" if self.arch.kind == "softmax_regression" else "lastlayer_full"
        self.curvature.validate("curvature")
        if self.aggregation not in ("mean", "sum"):
            raise ConfigError(f"aggregation: expected 'mean' or 'sum', got {self.aggregation!r}")
        if not 0.0 <= self.budget <= 100.0:
            raise ConfigError(f"budget: must lie in [0, 100], got {self.budget}")
        if self.classes_kept is not None and len(self.classes_kept) < 2:
            raise ConfigError("classes_kept: keep at least two classes")
        self.sweep.validate("sweep")
        self.report.validate("report")
        self.seeds.validate("seeds")
        try:
            self.train_config()
        except ArgumentError as exc:
            raise ConfigError(f"train: {exc}") from exc
        return self

    def train_config(self):
        t = self.train
        return TrainConfig(
            optimizer=t.optimizer,
            learning_rate=float(t.learning_rate),
            batch_size=t.batch_size,
            max_epochs=t.max_epochs,
            early_stop_patience=t.early_stop_patience,
            val_fraction=t.val_fraction,
            seed=self.seeds.train,
        )

    def flip_spec(self):
        if self.flip is None:
            return None
        return FlipSpec(self.flip.source_class, self.flip.target_class, self.flip.rate, self.seeds.data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()))


# --------------------------------------------------------------------------- parsing


def _coerce(value: Any, hint: Any, path: str) -> Any:
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    origin = get_origin(hint)
    args = get_args(hint)
    if origin is not None and type(None) in args:
        if value is None:
            return None
        rest = [a for a in args if a is not type(None)]
        return _coerce(value, rest[0], path)
    if hint is Any:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def _build(cls, raw: Any, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for name in names:
        if name in raw:
            sub = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(raw[name], hints[name], sub)
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").resolve()


def apply_override(raw: dict, item: str) -> None:
    """Apply one ``dotted.key=value`` override in place; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected KEY=VALUE")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {item!r}: empty path component")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse value {text!r}") from exc
    node = raw
    for i, part in enumerate(parts[:-1]):
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{'.'.join(parts[: i + 1])}: not a section")
        node = nxt
    node[parts[-1]] = value


def load(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    return from_dict(raw)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
