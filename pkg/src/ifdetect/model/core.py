"""Classifier zoo over a flat parameter vector.

Three architectures share one contract: softmax output, cross-entropy loss, exact
reverse-mode gradients laid out like the parameter vector, and a final linear
layer whose weights and bias form a contiguous slice at the end of the vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ifdetect.errors import ArgumentError, NumericalError
from ifdetect.model import ops

KINDS = ("softmax_regression", "mlp1", "cnn3")
DEFAULT_CONV_CHANNELS = (8, 16, 32)
DEFAULT_HIDDEN = 64
PROB_FLOOR = 1e-12
MAX_LOSS = -np.log(PROB_FLOOR)


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str
    input_shape: tuple
    n_classes: int
    hidden_width: int | None = None
    conv_channels: tuple | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown architecture {self.kind!r}; choose from {KINDS}")
        if self.n_classes < 2:
            raise ArgumentError("need at least two classes")
        if not self.input_shape or min(self.input_shape) < 1:
            raise ArgumentError(f"bad input_shape {self.input_shape}")
        if self.kind == "mlp1":
            width = DEFAULT_HIDDEN if self.hidden_width is None else int(self.hidden_width)
            if width < 1:
                raise ArgumentError("mlp1 needs hidden_width >= 1")
            object.__setattr__(self, "hidden_width", width)
        if self.kind == "cnn3":
            chans = tuple(self.conv_channels or DEFAULT_CONV_CHANNELS)
            if len(chans) != 3 or min(chans) < 1:
                raise ArgumentError("cnn3 needs exactly three positive conv channel counts")
            if len(self.input_shape) not in (2, 3):
                raise ArgumentError("cnn3 input_shape must be (H, W) or (C, H, W)")
            object.__setattr__(self, "conv_channels", chans)

    @property
    def n_inputs(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "hidden_width": self.hidden_width,
            "conv_channels": list(self.conv_channels) if self.conv_channels else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            n_classes=int(d["n_classes"]),
            hidden_width=d.get("hidden_width"),
            conv_channels=tuple(d["conv_channels"]) if d.get("conv_channels") else None,
        )


@dataclass(frozen=True)
class LayerSlot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


def _image_geometry(spec: ArchitectureSpec) -> tuple[int, int, int]:
    if len(spec.input_shape) == 2:
        return spec.input_shape[0], spec.input_shape[1], 1
    c, h, w = spec.input_shape
    return h, w, c


def last_layer_input_dim(spec: ArchitectureSpec) -> int:
    if spec.kind == "softmax_regression":
        return spec.n_inputs
    if spec.kind == "mlp1":
        return spec.hidden_width
    h, w, _ = _image_geometry(spec)
    for _ in range(3):
        h, w = ops.pooled_size(h), ops.pooled_size(w)
    return h * w * spec.conv_channels[2]


def build_layout(spec: ArchitectureSpec) -> list[LayerSlot]:
    shapes: list[tuple[str, tuple, int]] = []  # name, shape, fan_in
    if spec.kind == "mlp1":
        shapes += [
            ("hidden.weight", (spec.hidden_width, spec.n_inputs), spec.n_inputs),
            ("hidden.bias", (spec.hidden_width,), spec.n_inputs),
        ]
    elif spec.kind == "cnn3":
        _, _, c_in = _image_geometry(spec)
        for i, c_out in enumerate(spec.conv_channels, start=1):
            fan = c_in * ops.KERNEL * ops.KERNEL
            shapes += [
                (f"conv{i}.weight", (c_out, c_in, ops.KERNEL, ops.KERNEL), fan),
                (f"conv{i}.bias", (c_out,), fan),
            ]
            c_in = c_out
    d = last_layer_input_dim(spec)
    shapes += [("fc.weight", (spec.n_classes, d), d), ("fc.bias", (spec.n_classes,), d)]
    layout, offset = [], 0
    for name, shape, _ in shapes:
        slot = LayerSlot(name, offset, shape)
        layout.append(slot)
        offset = slot.stop
    return layout


def _fan_ins(spec: ArchitectureSpec) -> dict[str, int]:
    out = {}
    for slot in build_layout(spec):
        if slot.name.endswith(".weight"):
            out[slot.name] = int(np.prod(slot.shape[1:]))
    return out


@dataclass(frozen=True)
class ModelParameters:
    """Flat parameter vector plus the architecture that gives it meaning."""

    spec: ArchitectureSpec
    values: np.ndarray
    seed: int = 0
    layout: tuple = field(init=False)
    last_layer_slice: tuple = field(init=False)

    def __post_init__(self) -> None:
        layout = tuple(build_layout(self.spec))
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        if values.shape != (layout[-1].stop,):
            raise ArgumentError(f"expected {layout[-1].stop} parameters, got {values.shape}")
        fc_w, fc_b = layout[-2], layout[-1]
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "last_layer_slice", (fc_w.offset, fc_b.stop - fc_w.offset))

    @property
    def n_params(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        for slot in self.layout:
            if slot.name == name:
                return self.values[slot.offset : slot.stop].reshape(slot.shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ModelParameters":
        return ModelParameters(self.spec, values, self.seed)

    def last_layer(self) -> np.ndarray:
        off, length = self.last_layer_slice
        return self.values[off : off + length]


@dataclass(frozen=True)
class PerSampleGradient:
    values: np.ndarray
    sample_index: int = -1
    split_tag: str = "train"

    def __post_init__(self) -> None:
        if not np.isfinite(self.values).all():
            raise NumericalError(f"non-finite gradient for sample {self.sample_index}")


def init_params(spec: ArchitectureSpec, seed: int) -> ModelParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    fans = _fan_ins(spec)
    layout = build_layout(spec)
    values = np.zeros(layout[-1].stop)
    for slot in layout:
        if slot.name in fans:
            bound = 1.0 / np.sqrt(fans[slot.name])
            values[slot.offset : slot.stop] = rng.uniform(-bound, bound, slot.size)
    return ModelParameters(spec, values, seed)


# --------------------------------------------------------------------------- engine


def _check(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in layer {name}")


def _as_batch(spec: ArchitectureSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ArgumentError(f"input shape {x.shape[1:]} does not match {spec.input_shape}")
    return x


def _forward(params: ModelParameters, x: np.ndarray):
    """Batched forward. Returns logits, last-layer input and a cache for the reverse pass."""
    spec = params.spec
    b = x.shape[0]
    cache: dict = {}
    if spec.kind == "softmax_regression":
        a = x.reshape(b, -1)
    elif spec.kind == "mlp1":
        flat = x.reshape(b, -1)
        pre = flat @ params.view("hidden.weight").T + params.view("hidden.bias")
        _check("hidden", pre)
        cache["flat"], cache["pre"] = flat, pre
        a = np.maximum(pre, 0.0)
    else:
        if len(spec.input_shape) == 2:
            h = x[..., None]
        else:
            h = np.moveaxis(x, 1, -1)
        for i in (1, 2, 3):
            w = params.view(f"conv{i}.weight")
            pre, cols = ops.conv_forward(h, w, params.view(f"conv{i}.bias"))
            _check(f"conv{i}", pre)
            act = np.maximum(pre, 0.0)
            pooled, pcache = ops.pool_forward(act)
            cache[f"conv{i}"] = (h.shape, cols, pre, pcache)
            h = pooled
        cache["pooled_shape"] = h.shape
        a = h.reshape(b, -1)
    logits = a @ params.view("fc.weight").T + params.view("fc.bias")
    _check("fc", logits)
    return logits, a, cache


def _backward(params: ModelParameters, a: np.ndarray, cache: dict, dz: np.ndarray, per_sample: bool) -> np.ndarray:
    """Reverse pass from logit gradients ``dz`` (B, C).

    With ``per_sample`` the result is (B, W); otherwise gradients are summed over
    the batch into a single (W,) vector.
    """
    spec = params.spec
    b = dz.shape[0]
    grads: dict[str, np.ndarray] = {}
    if per_sample:
        grads["fc.weight"] = dz[:, :, None] * a[:, None, :]
        grads["fc.bias"] = dz
    else:
        grads["fc.weight"] = dz.T @ a
        grads["fc.bias"] = dz.sum(axis=0)

    if spec.kind == "mlp1":
        da = dz @ params.view("fc.weight")
        dpre = da * (cache["pre"] > 0)
        flat = cache["flat"]
        if per_sample:
            grads["hidden.weight"] = dpre[:, :, None] * flat[:, None, :]
            grads["hidden.bias"] = dpre
        else:
            grads["hidden.weight"] = dpre.T @ flat
            grads["hidden.bias"] = dpre.sum(axis=0)
    elif spec.kind == "cnn3":
        dh = (dz @ params.view("fc.weight")).reshape(cache["pooled_shape"])
        for i in (3, 2, 1):
            x_shape, cols, pre, pcache = cache[f"conv{i}"]
            dact = ops.pool_backward(dh, pcache)
            dpre = dact * (pre > 0)
            dh, dw, db = ops.conv_backward(dpre, cols, params.view(f"conv{i}.weight"), x_shape, per_sample)
            grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = dw, db

    parts = []
    for slot in params.layout:
        g = grads[slot.name]
        _check(slot.name, g)
        parts.append(g.reshape(b, -1) if per_sample else g.ravel())
    return np.concatenate(parts, axis=-1)


def _onehot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def _check_labels(spec: ArchitectureSpec, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= spec.n_classes):
        raise ArgumentError(f"label out of range for {spec.n_classes} classes")
    return y


def _losses_from_logits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    logp = ops.log_softmax(logits)
    nll = -logp[np.arange(len(y)), y]
    return np.minimum(nll, MAX_LOSS)


# --------------------------------------------------------------------------- single-sample API


def forward(params: ModelParameters, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != params.spec.input_shape:
        raise ArgumentError(f"input shape {x.shape} does not match {params.spec.input_shape}")
    logits, _, _ = _forward(params, x[None])
    return ops.softmax(logits)[0]


def loss(params: ModelParameters, x: np.ndarray, y: int) -> float:
    """Cross-entropy ``-log max(p_y, 1e-12)``."""
    y_arr = _check_labels(params.spec, [y])
    x = _as_batch(params.spec, np.asarray(x)[None])
    logits, _, _ = _forward(params, x)
    return float(_losses_from_logits(logits, y_arr)[0])


def grad(params: ModelParameters, x: np.ndarray, y: int, sample_index: int = -1, split_tag: str = "train") -> PerSampleGradient:
    """Exact gradient of :func:`loss` with respect to every parameter.

    The probability floor only clips the reported loss; the gradient is that of
    the unclipped log-softmax, ``p - onehot(y)`` at the logits.
    """
    y_arr = _check_labels(params.spec, [y])
    x = _as_batch(params.spec, np.asarray(x)[None])
    logits, a, cache = _forward(params, x)
    dz = ops.softmax(logits) - _onehot(y_arr, params.spec.n_classes)
    g = _backward(params, a, cache, dz, per_sample=False)
    return PerSampleGradient(g, sample_index, split_tag)


def grad_last_layer(params: ModelParameters, x: np.ndarray, y: int, sample_index: int = -1, split_tag: str = "train"):
    """Gradient over the final linear layer only, plus that layer's input ``a(x)``.

    Closed form: weights ``(p - onehot(y)) outer a(x)``, bias ``p - onehot(y)``.
    """
    y_arr = _check_labels(params.spec, [y])
    x = _as_batch(params.spec, np.asarray(x)[None])
    g, a = last_layer_grads(params, x, y_arr)
    return PerSampleGradient(g[0], sample_index, split_tag), a[0]


# --------------------------------------------------------------------------- batched helpers


def _chunks(n: int, size: int) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def predict_proba(params: ModelParameters, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    x = _as_batch(params.spec, x)
    out = np.empty((len(x), params.spec.n_classes))
    for sl in _chunks(len(x), chunk):
        logits, _, _ = _forward(params, x[sl])
        out[sl] = ops.softmax(logits)
    return out


def last_layer_inputs(params: ModelParameters, x: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Penultimate activations ``a(x)`` and probabilities for a batch."""
    x = _as_batch(params.spec, x)
    acts = np.empty((len(x), last_layer_input_dim(params.spec)))
    probs = np.empty((len(x), params.spec.n_classes))
    for sl in _chunks(len(x), chunk):
        logits, a, _ = _forward(params, x[sl])
        acts[sl], probs[sl] = a, ops.softmax(logits)
    return acts, probs


def last_layer_grads(params: ModelParameters, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample last-layer gradients (n, slice length) in parameter order, and ``a(x)``."""
    y = _check_labels(params.spec, y)
    acts, probs = last_layer_inputs(params, x)
    r = probs - _onehot(y, params.spec.n_classes)
    g = np.concatenate([(r[:, :, None] * acts[:, None, :]).reshape(len(y), -1), r], axis=1)
    _check("fc", g)
    return g, acts


def losses(params: ModelParameters, x: np.ndarray, y: np.ndarray, chunk: int = 1024) -> np.ndarray:
    x = _as_batch(params.spec, x)
    y = _check_labels(params.spec, y)
    out = np.empty(len(y))
    for sl in _chunks(len(y), chunk):
        logits, _, _ = _forward(params, x[sl])
        out[sl] = _losses_from_logits(logits, y[sl])
    return out


def mean_loss_and_grad(params: ModelParameters, x: np.ndarray, y: np.ndarray, chunk: int = 1024) -> tuple[float, np.ndarray]:
    """Mean loss and the gradient of the mean loss over a batch."""
    x = _as_batch(params.spec, x)
    y = _check_labels(params.spec, y)
    n = len(y)
    total, g = 0.0, np.zeros(params.n_params)
    for sl in _chunks(n, chunk):
        logits, a, cache = _forward(params, x[sl])
        total += float(_losses_from_logits(logits, y[sl]).sum())
        dz = ops.softmax(logits) - _onehot(y[sl], params.spec.n_classes)
        g += _backward(params, a, cache, dz, per_sample=False)
    return total / n, g / n


def iter_per_sample_grads(params: ModelParameters, x: np.ndarray, y: np.ndarray, chunk: int = 128) -> Iterator[tuple[slice, np.ndarray]]:
    """Yield ``(rows, G)`` with ``G[i]`` the full gradient of sample ``rows.start + i``."""
    x = _as_batch(params.spec, x)
    y = _check_labels(params.spec, y)
    for sl in _chunks(len(y), chunk):
        logits, a, cache = _forward(params, x[sl])
        dz = ops.softmax(logits) - _onehot(y[sl], params.spec.n_classes)
        yield sl, _backward(params, a, cache, dz, per_sample=True)


def per_sample_grads(params: ModelParameters, x: np.ndarray, y: np.ndarray, chunk: int = 128) -> np.ndarray:
    out = np.empty((len(y), params.n_params))
    for sl, g in iter_per_sample_grads(params, x, y, chunk):
        out[sl] = g
    return out
