"""Trainable layers, parameter counting, freezing and weight containers."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training or when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


@dataclass(eq=False)
class Layer:
    """Base layer: named parameters plus a freeze flag."""

    kind: ClassVar[str] = "layer"
    params: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def hyper(self) -> dict[str, Any]:
        return {}

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def init_params(self, input_shape: tuple[int, ...], rng: np.random.Generator) -> None:
        """Allocate parameters for ``input_shape`` (per-sample, no batch axis)."""

    def set_frozen(self, flag: bool) -> "Layer":
        self.frozen = bool(flag)
        for p in self.params.values():
            p.requires_grad = not self.frozen
        return self

    @property
    def has_params(self) -> bool:
        return bool(self.params)


@dataclass(eq=False)
class Dense(Layer):
    kind: ClassVar[str] = "dense"
    units: int = 1
    activation: str | None = None

    def init_params(self, input_shape, rng):
        (n_in,) = input_shape
        self.params = {
            "kernel": Tensor(glorot_uniform(rng, (n_in, self.units), n_in, self.units), requires_grad=True),
            "bias": Tensor(np.zeros(self.units), requires_grad=True),
        }
        self.set_frozen(self.frozen)

    def output_shape(self, input_shape):
        return (self.units,)

    def hyper(self):
        return {"units": self.units, "activation": self.activation}

    def forward(self, x, training=False, rng=None):
        z = ad.add(ad.matmul(x, self.params["kernel"]), self.params["bias"])
        return _activate(z, self.activation)


@dataclass(eq=False)
class Conv2D(Layer):
    kind: ClassVar[str] = "conv2d"
    filters: int = 1
    kernel: tuple[int, int] = (1, 1)
    activation: str | None = "leaky_relu"
    slope: float = 0.01

    def init_params(self, input_shape, rng):
        _, _, cin = input_shape
        kh, kw = self.kernel
        fan_in, fan_out = kh * kw * cin, kh * kw * self.filters
        self.params = {
            "kernel": Tensor(glorot_uniform(rng, (self.filters, kh, kw, cin), fan_in, fan_out), requires_grad=True),
            "bias": Tensor(np.zeros(self.filters), requires_grad=True),
        }
        self.set_frozen(self.frozen)

    def output_shape(self, input_shape):
        h, w, _ = input_shape
        return (h, w, self.filters)

    def hyper(self):
        return {"filters": self.filters, "kernel": list(self.kernel), "activation": self.activation, "slope": self.slope}

    def forward(self, x, training=False, rng=None):
        z = ad.conv2d_same(x, self.params["kernel"], self.params["bias"])
        return _activate(z, self.activation, self.slope)


@dataclass(eq=False)
class GRU(Layer):
    """Single-bias GRU returning the full hidden sequence.

    Parameter layout follows the usual per-gate split: ``W_*`` [units, input],
    ``U_*`` [units, units], ``b_*`` [units].
    """

    kind: ClassVar[str] = "gru"
    units: int = 1
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    def init_params(self, input_shape, rng):
        _, n_in = input_shape
        u = self.units
        params = {}
        for g in ("z", "r", "h"):
            params[f"W_{g}"] = Tensor(glorot_uniform(rng, (u, n_in), n_in, u), requires_grad=True)
            params[f"U_{g}"] = Tensor(glorot_uniform(rng, (u, u), u, u), requires_grad=True)
            params[f"b_{g}"] = Tensor(np.zeros(u), requires_grad=True)
        self.params = params
        self.set_frozen(self.frozen)

    def output_shape(self, input_shape):
        p, _ = input_shape
        return (p, self.units)

    def hyper(self):
        return {"units": self.units, "dropout": self.dropout}

    def forward(self, x, training=False, rng=None):
        return gru_forward(x, self.params, self.dropout, training, rng)


def gru_forward(
    seq: Tensor,
    cell: dict[str, Tensor],
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run a GRU over ``seq`` ([p, input] or [B, p, input]) from a zero state.

    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    h~ = tanh(W_h x + U_h (r*h) + b_h), h' = (1-z)*h + z*h~.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    batched = seq.ndim == 3
    x = seq if batched else ad.reshape(seq, (1,) + seq.shape)
    b, p, n_in = x.shape
    units = cell["U_z"].shape[0]
    x = dropout(x, dropout_rate, training, rng)
    # Input projections for every timestep at once.
    proj = {}
    for g in ("z", "r", "h"):
        proj[g] = ad.add(ad.matmul(x, ad.transpose(cell[f"W_{g}"])), cell[f"b_{g}"])
    Uz, Ur, Uh = (ad.transpose(cell[k]) for k in ("U_z", "U_r", "U_h"))
    h = Tensor(np.zeros((b, units)))
    outs = []
    for t in range(p):
        xz = ad.slice_(proj["z"], (slice(None), t))
        xr = ad.slice_(proj["r"], (slice(None), t))
        xh = ad.slice_(proj["h"], (slice(None), t))
        z = ad.sigmoid(ad.add(xz, ad.matmul(h, Uz)))
        r = ad.sigmoid(ad.add(xr, ad.matmul(h, Ur)))
        cand = ad.tanh(ad.add(xh, ad.matmul(ad.mul(r, h), Uh)))
        h = ad.add(h, ad.mul(z, ad.add(cand, -h)))
        outs.append(h)
    out = ad.stack(outs, axis=1)
    return out if batched else ad.reshape(out, (p, units))


@dataclass(eq=False)
class Dropout(Layer):
    kind: ClassVar[str] = "dropout"
    rate: float = 0.0

    def output_shape(self, input_shape):
        return input_shape

    def hyper(self):
        return {"rate": self.rate}

    def forward(self, x, training=False, rng=None):
        return dropout(x, self.rate, training, rng)


@dataclass(eq=False)
class AvgPool2D(Layer):
    kind: ClassVar[str] = "avgpool2d"
    pool: tuple[int, int] = (2, 1)

    def output_shape(self, input_shape):
        h, w, c = input_shape
        return (h // self.pool[0], w // self.pool[1], c)

    def hyper(self):
        return {"pool": list(self.pool)}

    def forward(self, x, training=False, rng=None):
        return ad.avgpool2d(x, self.pool)


@dataclass(eq=False)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        return ad.reshape(x, (x.shape[0], -1))


LAYER_TYPES: dict[str, type[Layer]] = {cls.kind: cls for cls in (Dense, Conv2D, GRU, Dropout, AvgPool2D, Flatten)}


def _activate(z: Tensor, activation: str | None, slope: float = 0.01) -> Tensor:
    if activation is None or activation == "linear":
        return z
    if activation == "tanh":
        return ad.tanh(z)
    if activation == "sigmoid":
        return ad.sigmoid(z)
    if activation == "leaky_relu":
        return ad.leaky_relu(z, slope)
    raise ValueError(f"unknown activation '{activation}'")


def param_count(layer: Layer, input_shape: tuple[int, ...] | None = None) -> int:
    """Closed-form parameter count.

    Uses the allocated tensors when present; otherwise needs ``input_shape``.
    """
    if layer.params:
        return layer.param_count()
    if isinstance(layer, GRU):
        _, i = input_shape
        return 3 * layer.units * (i + layer.units + 1)
    if isinstance(layer, Conv2D):
        kh, kw = layer.kernel
        return layer.filters * (kh * kw * input_shape[-1]) + layer.filters
    if isinstance(layer, Dense):
        return layer.units * (input_shape[0] + 1)
    return 0


def set_frozen(layer: Layer, flag: bool) -> Layer:
    return layer.set_frozen(flag)


# ----------------------------------------------------------------------------
# weight container: b"DTLW" + u32 version + u32 count, then per parameter
# u32 name-len, utf-8 name, u32 ndim, u32 dims..., little-endian float64 payload
# ----------------------------------------------------------------------------

_MAGIC = b"DTLW"
_VERSION = 1


def save_weights(path: str | Path, named: dict[str, np.ndarray], manifest: dict[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            entries.append({"name": name, "shape": list(arr.shape), "offset": fh.tell()})
            fh.write(arr.tobytes())
    doc = dict(manifest or {})
    doc["parameters"] = entries
    doc["format"] = {"magic": _MAGIC.decode(), "version": _VERSION, "dtype": "<f8"}
    manifest_path(path).write_text(json.dumps(doc, indent=2))


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def load_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a weight container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return out, manifest
