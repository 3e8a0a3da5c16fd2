"""RNN and CNN traffic predictors built from the tuned hyperparameters."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    GRU,
    LAYER_TYPES,
    AvgPool2D,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    load_weights,
    save_weights,
)

INPUT_FEATURES = ["rnti_count", "rb_down", "rb_up", "mcs_down", "mcs_up"]
TARGET_FEATURES = ["rnti_count", "rb_down", "rb_up", "thr_down", "thr_up"]
# Column order seen by the convolutional stack.
CNN_FEATURE_ORDER = ["rb_down", "rb_up", "rnti_count", "mcs_down", "mcs_up"]


@dataclass
class RnnHyper:
    units: tuple[int, ...] = (128, 64, 32, 16)
    dropout_first: float = 0.0
    dropout_last: float = 0.2


@dataclass
class CnnHyper:
    filters_first: int = 16
    filters_last: int = 32
    kernels: tuple[tuple[int, int], ...] = ((16, 3), (3, 5), (8, 3), (4, 3))
    pool: tuple[int, int] = (2, 1)
    slope: float = 0.01


@dataclass(eq=False)
class ModelGraph:
    """Ordered layers applied to a [B, p, m] window batch."""

    arch: str
    layers: list[Layer]
    input_shape: tuple[int, int]
    output_dim: int
    hyper: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    feature_perm: tuple[int, ...] | None = None

    # -- forward ---------------------------------------------------------
    def prepare_input(self, x: Tensor) -> Tensor:
        if self.feature_perm is not None:
            cols = [ad.slice_(x, (slice(None), slice(None), slice(j, j + 1))) for j in self.feature_perm]
            x = ad.concat(cols, axis=2)
        if self.arch == "cnn":
            x = ad.reshape(x, x.shape + (1,))
        return x

    def forward(self, x: Tensor | np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ad.ShapeError(f"model expects [B, {self.input_shape[0]}, {self.input_shape[1]}], got {x.shape}")
        h = self.prepare_input(x)
        for layer in self.layers:
            h = layer.forward(h, training=training, rng=rng)
        return h

    __call__ = forward

    def predict(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        outs = []
        with ad.no_grad():
            for i in range(0, len(X), batch_size):
                outs.append(self.forward(X[i : i + batch_size]).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.output_dim))

    # -- parameters ------------------------------------------------------
    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params.values() if not (trainable_only and layer.frozen)]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{layer.kind}.{n}": p for i, layer in enumerate(self.layers) for n, p in layer.params.items()}

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def trainable_param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers if not layer.frozen)

    def parameterized_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    def freeze_all(self, flag: bool = True) -> None:
        for layer in self.layers:
            layer.set_frozen(flag)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in named.items():
            if t.shape != state[k].shape:
                raise ValueError(f"state mismatch for {k}: {t.shape} vs {state[k].shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    # -- descriptions ----------------------------------------------------
    def signature(self) -> dict[str, Any]:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "output_dim": self.output_dim,
            "layers": [{"kind": layer.kind, **layer.hyper()} for layer in self.layers],
        }

    def summary(self) -> dict[str, Any]:
        rows = []
        shape: tuple[int, ...] = self._inner_input_shape()
        for i, layer in enumerate(self.layers):
            shape = layer.output_shape(shape)
            rows.append(
                {
                    "index": i,
                    "kind": layer.kind,
                    "hyper": layer.hyper(),
                    "output_shape": list(shape),
                    "param_count": layer.param_count(),
                    "frozen": layer.frozen,
                }
            )
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "output_dim": self.output_dim,
            "hyper": self.hyper,
            "param_count": self.param_count(),
            "trainable_param_count": self.trainable_param_count(),
            "layers": rows,
        }

    def _inner_input_shape(self) -> tuple[int, ...]:
        p, m = self.input_shape
        return (p, m, 1) if self.arch == "cnn" else (p, m)

    def save(self, path: str | Path) -> None:
        manifest = {"model": self.summary(), "seed": self.seed, "feature_perm": self.feature_perm}
        save_weights(path, self.state(), manifest)


def _finalize(model: ModelGraph, seed: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    shape = model._inner_input_shape()
    for layer in model.layers:
        layer.init_params(shape, rng)
        shape = layer.output_shape(shape)
    return model


def build_rnn(p: int, m: int = 5, q: int = 5, hyper: RnnHyper | None = None, seed: int = 0) -> ModelGraph:
    """Four stacked GRUs (dropout on the first and last) then Flatten -> Dense(q, tanh)."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    hyper = hyper or RnnHyper()
    units = list(hyper.units)
    layers: list[Layer] = []
    for k, u in enumerate(units):
        rate = hyper.dropout_first if k == 0 else hyper.dropout_last if k == len(units) - 1 else 0.0
        layers.append(GRU(units=u, dropout=rate))
    layers += [Flatten(), Dense(units=q, activation="tanh")]
    model = ModelGraph("rnn", layers, (p, m), q, hyper=_jsonable(asdict(hyper)), seed=seed)
    return _finalize(model, seed)


def build_cnn(p: int, m: int = 5, q: int = 5, hyper: CnnHyper | None = None, seed: int = 0) -> ModelGraph:
    """Four same-padded convs with LeakyReLU, [2,1] average pooling, Flatten -> Dense(q, tanh)."""
    hyper = hyper or CnnHyper()
    if p < hyper.pool[0]:
        raise ValueError(f"p must be >= {hyper.pool[0]} for pooling, got {p}")
    filters = [hyper.filters_first, hyper.filters_first, hyper.filters_last, hyper.filters_last]
    layers: list[Layer] = [
        Conv2D(filters=f, kernel=tuple(k), activation="leaky_relu", slope=hyper.slope)
        for f, k in zip(filters, hyper.kernels)
    ]
    layers += [AvgPool2D(pool=tuple(hyper.pool)), Flatten(), Dense(units=q, activation="tanh")]
    perm = None
    if m == len(INPUT_FEATURES):
        perm = tuple(INPUT_FEATURES.index(c) for c in CNN_FEATURE_ORDER)
    model = ModelGraph("cnn", layers, (p, m), q, hyper=_jsonable(asdict(hyper)), seed=seed, feature_perm=perm)
    return _finalize(model, seed)


def build_model(arch: str, p: int, m: int = 5, q: int = 5, seed: int = 0) -> ModelGraph:
    if arch == "rnn":
        return build_rnn(p, m, q, seed=seed)
    if arch == "cnn":
        return build_cnn(p, m, q, seed=seed)
    raise ValueError(f"unknown architecture '{arch}' (expected rnn or cnn)")


def load_model(path: str | Path) -> ModelGraph:
    """Rebuild a model from a weight container and its manifest."""
    state, manifest = load_weights(path)
    info = manifest["model"]
    p, m = info["input_shape"]
    arch = info["arch"]
    if arch == "rnn":
        h = info["hyper"]
        model = build_rnn(p, m, info["output_dim"], RnnHyper(tuple(h["units"]), h["dropout_first"], h["dropout_last"]))
    else:
        h = info["hyper"]
        model = build_cnn(
            p,
            m,
            info["output_dim"],
            CnnHyper(h["filters_first"], h["filters_last"], tuple(tuple(k) for k in h["kernels"]), tuple(h["pool"]), h["slope"]),
        )
    model.load_state(state)
    model.seed = manifest.get("seed", 0)
    for row, layer in zip(info["layers"], model.layers):
        layer.set_frozen(row.get("frozen", False))
    return model


def _jsonable(d: dict[str, Any]) -> dict[str, Any]:
    return json.loads(json.dumps(d))


__all__ = [
    "ModelGraph",
    "RnnHyper",
    "CnnHyper",
    "build_rnn",
    "build_cnn",
    "build_model",
    "load_model",
    "INPUT_FEATURES",
    "TARGET_FEATURES",
    "CNN_FEATURE_ORDER",
    "LAYER_TYPES",
]
