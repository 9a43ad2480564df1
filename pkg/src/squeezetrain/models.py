"""Desk-scale classifiers built as autodiff expressions."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad

KINDS = ("mlp", "small_cnn")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a classifier mapping ``input_shape`` to ``num_classes`` logits.

    ``widths`` holds the hidden layer sizes for ``mlp`` and the two conv
    channel counts for ``small_cnn``.
    """

    kind: str = "mlp"
    input_shape: tuple[int, ...] = (1, 28, 28)
    num_classes: int = 10
    widths: tuple[int, ...] = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.widths is None:
            object.__setattr__(self, "widths", (256, 256) if self.kind == "mlp" else (16, 32))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if any(w <= 0 for w in self.widths) or any(d <= 0 for d in self.input_shape):
            raise ValueError("widths and input dimensions must be positive")
        if self.kind == "small_cnn":
            if len(self.widths) != 2 or len(self.input_shape) != 3:
                raise ValueError("small_cnn needs two channel counts and a (C, H, W) input")
            if self.input_shape[1] % 4 or self.input_shape[2] % 4:
                raise ValueError("small_cnn needs H and W divisible by 4")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(d["kind"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(d["widths"]))


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the only layout a spec admits."""
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.kind == "mlp":
        dims = [int(np.prod(spec.input_shape)), *spec.widths, spec.num_classes]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"dense{i}.weight"] = (a, b)
            shapes[f"dense{i}.bias"] = (b,)
    else:
        c, h, w = spec.input_shape
        for i, f in enumerate(spec.widths):
            shapes[f"conv{i}.weight"] = (f, c, 3, 3)
            shapes[f"conv{i}.bias"] = (f,)
            c = f
        shapes["dense.weight"] = (c * (h // 4) * (w // 4), spec.num_classes)
        shapes["dense.bias"] = (spec.num_classes,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in, relu gain) weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


@lru_cache(maxsize=None)
def param_slots(spec: ModelSpec) -> dict[str, ad.Expr]:
    return {name: ad.slot(name, shape) for name, shape in param_shapes(spec).items()}


def apply(spec: ModelSpec, x: ad.Expr) -> ad.Expr:
    """Logits expression for the batch expression ``x`` with shared parameter slots."""
    p = param_slots(spec)
    if x.shape[1:] != spec.input_shape:
        raise ad.ShapeError(f"model input expects (batch, *{spec.input_shape}), got {x.shape}")
    n = x.shape[0]
    if spec.kind == "mlp":
        h = ad.reshape(x, (n, int(np.prod(spec.input_shape))))
        layers = len(spec.widths) + 1
        for i in range(layers):
            h = ad.bias_add(h @ p[f"dense{i}.weight"], p[f"dense{i}.bias"])
            if i < layers - 1:
                h = ad.relu(h)
        return h
    h = x
    for i in range(2):
        h = ad.conv2d(h, p[f"conv{i}.weight"], padding=1)
        h = ad.maxpool2d(ad.relu(ad.bias_add(h, p[f"conv{i}.bias"])))
    h = ad.reshape(h, (n, int(np.prod(h.shape[1:]))))
    return ad.bias_add(h @ p["dense.weight"], p["dense.bias"])


@lru_cache(maxsize=64)
def logits_graph(spec: ModelSpec, batch: int) -> ad.Expr:
    return apply(spec, ad.slot("x", (batch, *spec.input_shape)))


@lru_cache(maxsize=64)
def _probs_graph(spec: ModelSpec, batch: int) -> ad.Expr:
    return ad.softmax(logits_graph(spec, batch))


def _check_batch(spec: ModelSpec, x: np.ndarray):
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise ad.ShapeError(f"expected a batch of shape (n, *{spec.input_shape}), got {x.shape}")


def logits(spec: ModelSpec, params, x_batch) -> np.ndarray:
    x_batch = np.asarray(x_batch, dtype=np.float32)
    _check_batch(spec, x_batch)
    return ad.forward(logits_graph(spec, len(x_batch)), {**params, "x": x_batch})


def probs(spec: ModelSpec, params, x_batch) -> np.ndarray:
    x_batch = np.asarray(x_batch, dtype=np.float32)
    _check_batch(spec, x_batch)
    return ad.forward(_probs_graph(spec, len(x_batch)), {**params, "x": x_batch})


def correct(logit_rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Boolean mask of rows whose true-class logit strictly beats every other."""
    rows = np.arange(len(labels))
    true = logit_rows[rows, labels]
    others = logit_rows.copy()
    others[rows, labels] = -np.inf
    return true > others.max(axis=1)
