"""SmoothGrad sensitivity and LRP relevance maps, aggregated over a dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import GRU, AvgPool2D, Conv2D, Dense, Dropout, Flatten, Layer
from .models import ModelGraph

LRP_EPS = 1e-9


@dataclass
class AttributionMap:
    method: str
    output_index: int
    grid: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    def scaled(self) -> np.ndarray:
        """Grid min-max scaled to [0, 1] for rendering."""
        lo, hi = self.grid.min(), self.grid.max()
        return np.zeros_like(self.grid) if hi == lo else (self.grid - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def sensitivity_map(model: ModelGraph, x: np.ndarray, output_index: int) -> np.ndarray:
    """d S_i / d x for one window [p, m] or a batch [B, p, m] (eval mode)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    xt = Tensor(xb.copy(), requires_grad=True)
    out = model.forward(xt, training=False)
    # samples are independent, so the gradient of the sum is the per-sample gradient
    total = ad.sum_(ad.slice_(out, (slice(None), output_index)))
    ad.backward(total)
    g = xt.grad
    return g[0] if single else g


def smoothgrad(
    model: ModelGraph,
    x: np.ndarray,
    output_index: int,
    n_noise: int = 50,
    sigma: float = 0.1,
    seed: int = 0,
    input_range: float = 2.0,
) -> np.ndarray:
    """Average of sensitivity maps over Gaussian-perturbed copies of ``x``.

    ``sigma`` is a fraction of ``input_range`` (the width of [-1, 1]).
    """
    if n_noise < 1:
        raise ValueError("n_noise must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return sensitivity_map(model, x, output_index)
    rng = np.random.default_rng(seed)
    std = sigma * input_range
    acc = np.zeros_like(x)
    for _ in range(n_noise):
        acc += sensitivity_map(model, x + rng.normal(0.0, std, size=x.shape), output_index)
    return acc / n_noise


# ---------------------------------------------------------------------------
# LRP
# ---------------------------------------------------------------------------


class LrpError(ArithmeticError):
    pass


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    d = z + eps * np.where(z >= 0, 1.0, -1.0)
    if np.any(d == 0):
        raise LrpError("zero denominator in relevance redistribution")
    return d


@dataclass
class LrpTrace:
    """Per-layer relevance totals, for conservation checks.

    ``layers[i]`` holds (kind, relevance in, relevance out, absorbed), each
    summed per sample.  "Absorbed" is the share kept by biases and by the
    epsilon stabilizer, which the ratio rule does not pass to the inputs.
    """

    layers: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)

    def max_conservation_error(self) -> float:
        worst = 0.0
        for _, r_in, r_out, r_bias in self.layers:
            scale = np.maximum(np.abs(r_out), 1e-300)
            worst = max(worst, float(np.max(np.abs(r_in + r_bias - r_out) / scale)))
        return worst


def _linear_relevance(fn, a: np.ndarray, z: np.ndarray, r: np.ndarray, bias_term: np.ndarray, eps: float):
    """Redistribute ``r`` from the outputs of a linear map to its inputs.

    ``fn`` is the bias-free linear map and ``z`` the pre-activations with the
    bias included.  With
    d = z + eps*sign(z) and s = r / d the input relevance is a * (J^T s),
    which is exactly sum_k a_j w_jk / d_k * r_k.  What the inputs do not
    receive, (b_k + eps*sign(z_k)) / d_k * r_k, is returned as the absorbed
    share so conservation can be checked exactly.
    """
    d = _stabilize(z, eps)
    s = r / d
    at = Tensor(a.copy(), requires_grad=True)
    out = fn(at)
    ad.backward(ad.sum_(ad.mul(out, Tensor(s))))
    r_in = a * at.grad
    r_absorbed = ((bias_term + (d - z)) * s).reshape(len(a), -1).sum(axis=1)
    return r_in, r_absorbed


def _lrp_gru(layer: GRU, a: np.ndarray, r_out: np.ndarray, eps: float):
    """Relevance through a GRU with gates held constant.

    h_t = (1 - z) h_{t-1} + z c_t with c_t = tanh(W_h x_t + U_h (r h_{t-1}) + b_h).
    """
    P = {k: v.data for k, v in layer.params.items()}
    B, T, _ = a.shape
    u = layer.units
    sig = lambda v: 0.5 * (1.0 + np.tanh(0.5 * v))  # noqa: E731
    h = np.zeros((B, u))
    cache = []
    for t in range(T):
        x = a[:, t]
        z = sig(x @ P["W_z"].T + h @ P["U_z"].T + P["b_z"])
        rg = sig(x @ P["W_r"].T + h @ P["U_r"].T + P["b_r"])
        rh = rg * h
        xin = x @ P["W_h"].T
        hin = rh @ P["U_h"].T
        c = np.tanh(xin + hin + P["b_h"])
        keep = (1.0 - z) * h
        upd = z * c
        cache.append((x, h, rh, xin + hin + P["b_h"], keep, upd))
        h = keep + upd
    r_x = np.zeros_like(a)
    carry = np.zeros((B, u))
    r_bias = np.zeros(B)
    for t in reversed(range(T)):
        x, h_prev, rh, pre, keep, upd = cache[t]
        rt = r_out[:, t] + carry
        denom = _stabilize(keep + upd, eps)
        r_keep = keep / denom * rt
        r_upd = upd / denom * rt
        d = _stabilize(pre, eps)
        s = r_upd / d
        r_x[:, t] = x * (s @ P["W_h"])
        r_rh = rh * (s @ P["U_h"])
        r_bias += ((P["b_h"] + (d - pre)) * s).sum(axis=1) + (rt - r_keep - r_upd).sum(axis=1)
        # gate r is a constant weight, so r*h passes its relevance to h
        carry = r_keep + r_rh
    return r_x, r_bias


def lrp(
    model: ModelGraph,
    x: np.ndarray,
    output_index: int,
    eps: float = LRP_EPS,
    trace: LrpTrace | None = None,
) -> np.ndarray:
    """Relevance of each input cell for output ``output_index``.

    Relevance starts as the output value itself and is pushed back layer by
    layer with the epsilon-stabilized ratio rule; bias terms keep their share.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    with ad.no_grad():
        h0 = model.prepare_input(Tensor(xb)).data
        acts = [h0]
        for layer in model.layers:
            acts.append(layer.forward(Tensor(acts[-1]), training=False).data)
    out = acts[-1]
    r = np.zeros_like(out)
    r[:, output_index] = out[:, output_index]
    for layer, a in zip(reversed(model.layers), reversed(acts[:-1])):
        r_out = r
        r_bias = np.zeros(len(a))
        if isinstance(layer, Dense):
            W, b = layer.params["kernel"].data, layer.params["bias"].data
            z = a @ W + b
            r, r_bias = _linear_relevance(
                lambda t: ad.matmul(t, Tensor(W)), a, z, r_out, np.broadcast_to(b, z.shape), eps
            )
        elif isinstance(layer, Conv2D):
            W, b = layer.params["kernel"].data, layer.params["bias"].data
            zero_b = Tensor(np.zeros_like(b))
            z = ad.conv2d_same(Tensor(a), Tensor(W), Tensor(b)).data
            r, r_bias = _linear_relevance(
                lambda t: ad.conv2d_same(t, Tensor(W), zero_b), a, z, r_out, np.broadcast_to(b, z.shape), eps
            )
        elif isinstance(layer, AvgPool2D):
            z = ad.avgpool2d(Tensor(a), layer.pool).data
            r, r_bias = _linear_relevance(lambda t: ad.avgpool2d(t, layer.pool), a, z, r_out, np.zeros_like(z), eps)
        elif isinstance(layer, Flatten):
            r = r_out.reshape(a.shape)
        elif isinstance(layer, GRU):
            r, r_bias = _lrp_gru(layer, a, r_out, eps)
        elif isinstance(layer, Dropout):
            r = r_out
        else:
            raise LrpError(f"no relevance rule for layer kind '{layer.kind}'")
        if trace is not None:
            trace.layers.insert(
                0,
                (layer.kind, r.reshape(len(a), -1).sum(axis=1), r_out.reshape(len(a), -1).sum(axis=1), r_bias),
            )
    if model.arch == "cnn":
        r = r[..., 0]
    if model.feature_perm is not None:
        inv = np.argsort(model.feature_perm)
        r = r[:, :, inv]
    return r[0] if single else r


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def aggregate_maps(maps: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Mean of squared maps over samples, shape [p, m]."""
    stack = np.asarray(maps, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if len(stack) == 0:
        raise ValueError("need at least one map")
    return (stack**2).mean(axis=0)


def explain_dataset(
    model: ModelGraph,
    X: np.ndarray,
    method: str,
    outputs: Sequence[int] | None = None,
    stride: int = 1,
    n_noise: int = 50,
    sigma: float = 0.1,
    seed: int = 0,
    batch_size: int = 256,
    model_id: str = "",
    dataset_id: str = "",
) -> list[AttributionMap]:
    """Aggregate per-sample maps over every ``stride``-th window, per output."""
    Xs = np.asarray(X)[::stride]
    outputs = list(range(model.output_dim)) if outputs is None else list(outputs)
    maps = []
    for i in outputs:
        acc = np.zeros(Xs.shape[1:])
        for s in range(0, len(Xs), batch_size):
            xb = Xs[s : s + batch_size]
            if method == "smoothgrad":
                m = smoothgrad(model, xb, i, n_noise=n_noise, sigma=sigma, seed=seed + s)
            elif method == "lrp":
                m = lrp(model, xb, i)
            else:
                raise ValueError(f"unknown method '{method}'")
            acc += (m**2).sum(axis=0)
        meta = {"model_id": model_id, "dataset_id": dataset_id, "n_samples": int(len(Xs)), "stride": stride}
        if method == "smoothgrad":
            meta.update(n_noise=n_noise, sigma=sigma, seed=seed)
        maps.append(AttributionMap(method, i, acc / len(Xs), meta))
    return maps


def recency_ratio(grid: np.ndarray, rows: int | None = None) -> float:
    """Mean attribution of the latest rows over that of the earliest rows."""
    k = rows or max(1, grid.shape[0] // 5)
    early = grid[:k].mean()
    late = grid[-k:].mean()
    return float(late / early) if early > 0 else float("inf")


def export_maps(
    maps: Sequence[AttributionMap],
    out_dir: str | Path,
    columns: Sequence[str],
    target_columns: Sequence[str],
) -> Path:
    """One CSV grid per (method, output) plus ``index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for m in maps:
        name = f"{m.method}_{target_columns[m.output_index]}.csv"
        lines = ["row," + ",".join(columns)]
        for r, vals in enumerate(m.grid):
            lines.append(f"{r}," + ",".join(f"{v:.10g}" for v in vals))
        (out_dir / name).write_text("\n".join(lines) + "\n")
        index.append(
            {
                "method": m.method,
                "output_index": m.output_index,
                "output": target_columns[m.output_index],
                "file": name,
                "shape": list(m.grid.shape),
                **m.metadata,
            }
        )
    path = out_dir / "index.json"
    path.write_text(json.dumps(index, indent=2))
    return path
