"""Training protocol: chronological split, MSE loss, epoch cap, replicate runs."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .layers import GRU, Dropout
from .models import ModelGraph
from .pipeline import DataError, WindowedDataset, split_row

logger = logging.getLogger(__name__)

DEFAULT_BATCH = {"rnn": 128, "cnn": 256}
# Training days per site (larger split of each site).
DEFAULT_TRAIN_DAYS = {"PS": 21, "EB": 6, "LC": 6}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int | None = None
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-7
    patience: int = 5
    seeds: tuple[int, ...] = (1, 2, 3)
    train_days: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TRAIN_DAYS))
    cache_frozen_prefix: bool = True

    def batch_for(self, arch: str) -> int:
        return self.batch_size or DEFAULT_BATCH.get(arch, 128)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class EvalResult:
    mse: float
    per_output_mse: list[float]
    epochs_used: int = 0
    wall_time: float = 0.0
    seed: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    model: ModelGraph
    history: list[EvalResult]
    best_epoch: int
    epochs_used: int
    wall_time: float
    steps: int
    final: EvalResult | None = None


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-7):
        self.params = list(params)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr=1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * g


def make_optimizer(config: TrainConfig, params: Sequence[Tensor]):
    if config.optimizer == "adam":
        return Adam(params, config.lr, config.betas, config.eps)
    if config.optimizer == "sgd":
        return SGD(params, config.lr)
    raise ValueError(f"unknown optimizer '{config.optimizer}'")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split(dataset: WindowedDataset, train_days: float) -> tuple[WindowedDataset, WindowedDataset]:
    """Chronological split at ``train_days`` after the first bucket.

    A window trains iff its target row lies before the cut; it validates iff
    its first input row lies at or after the cut.  Straddling windows are
    discarded so the two sets never share a row.
    """
    if dataset.row_timestamps is None:
        raise DataError("dataset has no timestamps; cannot split by days")
    ts = dataset.row_timestamps
    span_days = (ts[-1] - ts[0]) / 86400.0
    if train_days >= span_days:
        raise DataError(f"train_days={train_days} leaves no validation data (span {span_days:.2f} days)")
    cut = split_row(ts, train_days)
    train_idx = np.flatnonzero(dataset.target_index < cut)
    val_idx = np.flatnonzero(dataset.start_index >= cut)
    if len(train_idx) == 0:
        raise DataError("empty training split")
    if len(val_idx) == 0:
        raise DataError("empty validation split")
    return dataset.subset(train_idx), dataset.subset(val_idx)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def mse_table(pred: np.ndarray, target: np.ndarray) -> EvalResult:
    per = ((pred - target) ** 2).mean(axis=0)
    return EvalResult(float(per.mean()), per.tolist())


def evaluate(model: ModelGraph, dataset: WindowedDataset, batch_size: int = 1024) -> EvalResult:
    """Per-output and aggregate MSE on the normalized scale, dropout off."""
    return mse_table(model.predict(dataset.X, batch_size), dataset.Y)


def persistence(dataset: WindowedDataset) -> EvalResult:
    """Naive forecast: the targets observed at each window's last input row."""
    if dataset.Y_last is None:
        raise DataError("dataset lacks Y_last; rebuild it with pipeline.window")
    return mse_table(dataset.Y_last, dataset.Y)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _stochastic(layer) -> bool:
    return (isinstance(layer, GRU) and layer.dropout > 0) or (isinstance(layer, Dropout) and layer.rate > 0)


def frozen_prefix(model: ModelGraph) -> int:
    """Number of leading layers that are frozen and deterministic in training."""
    k = 0
    for layer in model.layers:
        if layer.has_params and not layer.frozen:
            break
        if _stochastic(layer):
            break
        k += 1
    # A parameter-free tail of the prefix gains nothing; stop at the last frozen weight layer.
    while k > 0 and not model.layers[k - 1].has_params:
        k -= 1
    return k


def _run_layers(model: ModelGraph, h: Tensor, start: int, stop: int, training: bool, rng) -> Tensor:
    for layer in model.layers[start:stop]:
        h = layer.forward(h, training=training, rng=rng)
    return h


def _features(model: ModelGraph, X: np.ndarray, k: int, batch_size: int = 1024) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            h = model.prepare_input(Tensor(X[i : i + batch_size]))
            outs.append(_run_layers(model, h, 0, k, False, None).data)
    return np.concatenate(outs, axis=0)


def train(
    model: ModelGraph,
    train_data: WindowedDataset,
    config: TrainConfig,
    val_data: WindowedDataset | None = None,
    seed: int = 0,
    on_epoch: Callable[[int, EvalResult], None] | None = None,
) -> TrainResult:
    """Fit unfrozen parameters with MSE loss.

    Keeps the weights of the best validation epoch and stops after
    ``config.patience`` epochs without improvement.  Wall time covers the
    optimizer loop only.
    """
    if tuple(train_data.X.shape[1:]) != tuple(model.input_shape):
        raise ad.ShapeError(f"data windows {train_data.X.shape[1:]} do not match model input {model.input_shape}")
    params = model.parameters(trainable_only=True)
    for layer in model.layers:
        layer.set_frozen(layer.frozen)
    history: list[EvalResult] = []
    if not params or config.epochs == 0:
        final = evaluate(model, val_data) if val_data is not None else None
        return TrainResult(model, history, 0, 0, 0.0, 0, final)

    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng([seed, 1])
    opt = make_optimizer(config, params)
    bs = config.batch_for(model.arch)
    k = frozen_prefix(model) if config.cache_frozen_prefix else 0
    if k:
        Xtr = _features(model, train_data.X, k)
        Xva = _features(model, val_data.X, k) if val_data is not None else None
    else:
        Xtr = train_data.X
        Xva = val_data.X if val_data is not None else None
    Ytr = train_data.Y

    def forward(xb: np.ndarray, training: bool) -> Tensor:
        h = Tensor(xb)
        if k == 0:
            h = model.prepare_input(h)
        return _run_layers(model, h, k, len(model.layers), training, drop_rng)

    def val_mse() -> EvalResult:
        preds = []
        with ad.no_grad():
            for i in range(0, len(Xva), 1024):
                preds.append(forward(Xva[i : i + 1024], False).data)
        return mse_table(np.concatenate(preds), val_data.Y)

    best, best_epoch, best_state, wait, steps = np.inf, 0, model.state(), 0, 0
    epochs_run = 0
    wall = 0.0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(Xtr))
        total = 0.0
        for i in range(0, len(order), bs):
            idx = order[i : i + bs]
            try:
                out = forward(Xtr[idx], True)
                loss = ad.mean(ad.square(ad.add(out, Tensor(-Ytr[idx]))))
            except NumericalError as exc:
                raise NumericalError(exc.op, f"epoch {epoch}, batch starting {i}") from exc
            grads = ad.backward(loss, params)
            opt.step([grads[p] for p in params])
            for p in params:
                if not np.isfinite(p.data).all():
                    raise NumericalError("optimizer_step", f"epoch {epoch}: parameter became non-finite")
            total += loss.item() * len(idx)
            steps += 1
        wall += time.perf_counter() - t0
        epochs_run = epoch
        if val_data is None:
            res = EvalResult(total / len(order), [], epoch, wall, seed)
            history.append(res)
            best_epoch = epoch
            continue
        try:
            res = val_mse()
        except NumericalError as exc:
            raise NumericalError(exc.op, f"epoch {epoch}, validation pass") from exc
        res.epochs_used, res.wall_time, res.seed = epoch, wall, seed
        history.append(res)
        if on_epoch:
            on_epoch(epoch, res)
        logger.debug("epoch %d train_loss=%.5f val_mse=%.5f", epoch, total / len(order), res.mse)
        if res.mse < best:
            best, best_epoch, best_state, wait = res.mse, epoch, model.state(), 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    if val_data is not None:
        model.load_state(best_state)
    final = history[best_epoch - 1] if history else None
    if final is not None:
        final = EvalResult(final.mse, final.per_output_mse, epochs_run, wall, seed)
    return TrainResult(model, history, best_epoch, epochs_run, wall, steps, final)


def replicate(
    build: Callable[[int], ModelGraph],
    train_data: WindowedDataset,
    val_data: WindowedDataset,
    config: TrainConfig,
) -> tuple[list[TrainResult], EvalResult]:
    """Train once per configured seed; return runs and their averaged metrics."""
    runs = []
    for s in config.seeds:
        runs.append(train(build(s), train_data, config, val_data, seed=s))
    return runs, average([r.final for r in runs])


def average(results: Sequence[EvalResult]) -> EvalResult:
    per = np.mean([r.per_output_mse for r in results], axis=0)
    return EvalResult(
        float(np.mean([r.mse for r in results])),
        per.tolist(),
        int(round(np.mean([r.epochs_used for r in results]))),
        float(np.mean([r.wall_time for r in results])),
        None,
    )


# ---------------------------------------------------------------------------
# run ledger
# ---------------------------------------------------------------------------


class RunLedger:
    """Append-only JSONL file of run records, one per line."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.path = self.dir / "runs.jsonl"

    def append(self, record: dict[str, Any]) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out

    def run_ids(self) -> set[str]:
        return {r["run_id"] for r in self.records()}


def task_seed(seed: int, task_id: str) -> int:
    """Stable per-task seed derived from the global seed."""
    h = hashlib.sha256(f"{seed}:{task_id}".encode()).digest()
    return int.from_bytes(h[:4], "little")
