"""DCI logs to normalized, windowed tensors.

Raw per-record rows are bucketed into two-minute aggregates, throughput is
estimated from MCS and RB usage, and the resulting series is min-max scaled to
[-1, 1] and cut into sliding windows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .models import INPUT_FEATURES, TARGET_FEATURES

BUCKET_SECONDS = 120
BANDWIDTH_RB = 100
SUBFRAMES_PER_BUCKET = BUCKET_SECONDS * 1000

AGGREGATE_COLUMNS = ["timestamp", "rnti_count", "mcs_down", "mcs_up", "rb_down", "rb_up"]
RAW_COLUMNS = ["timestamp", "rnti", "mcs_down", "mcs_up", "rb_down", "rb_up"]


class DataError(ValueError):
    """Input data violates a pipeline precondition."""


@dataclass
class DciAggregate:
    timestamp: int
    rnti_count: int
    mcs_down: float
    mcs_up: float
    rb_down: float
    rb_up: float
    thr_down: float = 0.0
    thr_up: float = 0.0

    def __post_init__(self):
        if self.rnti_count < 0:
            raise DataError(f"rnti_count must be >= 0 at t={self.timestamp}")
        for name in ("mcs_down", "mcs_up"):
            v = getattr(self, name)
            if not 0.0 <= v <= 31.0:
                raise DataError(f"{name}={v} outside [0, 31] at t={self.timestamp}")
        for name in ("rb_down", "rb_up"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise DataError(f"{name}={v} outside [0, 100] at t={self.timestamp}")
        if self.thr_down < 0 or self.thr_up < 0:
            raise DataError(f"negative throughput at t={self.timestamp}")


# ---------------------------------------------------------------------------
# downsampling
# ---------------------------------------------------------------------------


def _check_ordered(ts: np.ndarray) -> None:
    if len(ts) > 1 and np.any(np.diff(ts) < 0):
        i = int(np.argmax(np.diff(ts) < 0))
        raise DataError(f"timestamps are not ordered: row {i + 1} ({ts[i + 1]}) precedes row {i} ({ts[i]})")


def downsample(
    records: pd.DataFrame,
    bucket_s: int = BUCKET_SECONDS,
    bandwidth_rb: int = BANDWIDTH_RB,
    derive: bool = True,
) -> list[DciAggregate]:
    """Aggregate raw DCI records into fixed buckets.

    ``records`` carries :data:`RAW_COLUMNS`; missing values are NaN.  A bucket
    is dropped when any variable is missing for all of its records; buckets
    with no records never appear.
    """
    missing = [c for c in RAW_COLUMNS if c not in records.columns]
    if missing:
        raise DataError(f"raw records lack columns {missing}")
    ts = records["timestamp"].to_numpy(dtype=np.float64)
    _check_ordered(ts)
    if len(records) == 0:
        return []
    df = records.copy()
    df["bucket"] = (np.floor(ts / bucket_s) * bucket_s).astype(np.int64)
    g = df.groupby("bucket", sort=True)
    agg = pd.DataFrame(
        {
            "rnti_count": g["rnti"].nunique(dropna=True),
            "rnti_seen": g["rnti"].count(),
            "mcs_down": g["mcs_down"].mean(),
            "mcs_up": g["mcs_up"].mean(),
            "rb_down": g["rb_down"].sum(min_count=1),
            "rb_up": g["rb_up"].sum(min_count=1),
        }
    )
    agg = agg[(agg["rnti_seen"] > 0)].dropna()
    capacity = bandwidth_rb * bucket_s * 1000
    out = []
    for bucket, row in agg.iterrows():
        a = DciAggregate(
            timestamp=int(bucket),
            rnti_count=int(row["rnti_count"]),
            mcs_down=float(row["mcs_down"]),
            mcs_up=float(row["mcs_up"]),
            rb_down=min(100.0, 100.0 * float(row["rb_down"]) / capacity),
            rb_up=min(100.0, 100.0 * float(row["rb_up"]) / capacity),
        )
        if derive:
            a.thr_down, a.thr_up = derive_throughput(a, bandwidth_rb, bucket_s * 1000)
        out.append(a)
    return out


# ---------------------------------------------------------------------------
# throughput estimate
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def load_tbs_table() -> tuple[np.ndarray, np.ndarray, int]:
    """(qm[32], rate[32], resource elements per RB) from the shipped table."""
    doc = json.loads(resources.files("traffic_dtl.resources").joinpath("tbs_table.json").read_text())
    entries = sorted(doc["entries"], key=lambda e: e["mcs"])
    if [e["mcs"] for e in entries] != list(range(32)):
        raise DataError("tbs table must list MCS 0..31 exactly once")
    qm = np.array([e["qm"] for e in entries], dtype=np.float64)
    rate = np.array([e["rate"] for e in entries], dtype=np.float64)
    return qm, rate, int(doc["resource_elements_per_rb"])


def bits_per_re(mcs) -> np.ndarray:
    """Spectral efficiency (bits per resource element), linear between integer MCS."""
    qm, rate, _ = load_tbs_table()
    mcs = np.asarray(mcs, dtype=np.float64)
    if np.any((mcs < 0) | (mcs > 31)) or not np.all(np.isfinite(mcs)):
        raise DataError(f"MCS outside [0, 31]: {mcs[(mcs < 0) | (mcs > 31)][:5]}")
    return np.interp(mcs, np.arange(32), qm * rate)


def throughput_bits(mcs, rb_pct, bandwidth_rb: int = BANDWIDTH_RB, subframes: int = SUBFRAMES_PER_BUCKET) -> np.ndarray:
    """Approximate cumulative TBS: n_rb * 168 RE * bits/RE, summed over subframes."""
    _, _, re_per_rb = load_tbs_table()
    n_rb = np.asarray(rb_pct, dtype=np.float64) / 100.0 * bandwidth_rb
    return subframes * n_rb * re_per_rb * bits_per_re(mcs)


def derive_throughput(
    agg: DciAggregate, bandwidth_rb: int = BANDWIDTH_RB, subframes: int = SUBFRAMES_PER_BUCKET
) -> tuple[float, float]:
    down = float(throughput_bits(agg.mcs_down, agg.rb_down, bandwidth_rb, subframes))
    up = float(throughput_bits(agg.mcs_up, agg.rb_up, bandwidth_rb, subframes))
    return down, up


def aggregates_to_frame(aggs: Sequence[DciAggregate]) -> pd.DataFrame:
    cols = AGGREGATE_COLUMNS + ["thr_down", "thr_up"]
    if not aggs:
        return pd.DataFrame(columns=cols)
    return pd.DataFrame([asdict(a) for a in aggs], columns=cols)


def add_throughput(frame: pd.DataFrame, bandwidth_rb: int = BANDWIDTH_RB) -> pd.DataFrame:
    out = frame.copy()
    out["thr_down"] = throughput_bits(out["mcs_down"].to_numpy(), out["rb_down"].to_numpy(), bandwidth_rb)
    out["thr_up"] = throughput_bits(out["mcs_up"].to_numpy(), out["rb_up"].to_numpy(), bandwidth_rb)
    return out


# ---------------------------------------------------------------------------
# CSV input
# ---------------------------------------------------------------------------


def read_site_csv(path: str | Path) -> pd.DataFrame:
    """Load either schema and return aggregates with derived throughput."""
    df = pd.read_csv(path)
    cols = list(df.columns)
    if all(c in cols for c in AGGREGATE_COLUMNS):
        _check_ordered(df["timestamp"].to_numpy(dtype=np.float64))
        df = df.dropna(subset=AGGREGATE_COLUMNS)
        return add_throughput(df[AGGREGATE_COLUMNS].reset_index(drop=True))
    if all(c in cols for c in RAW_COLUMNS):
        return aggregates_to_frame(downsample(df))
    raise DataError(f"{path}: header {cols} matches neither {AGGREGATE_COLUMNS} nor {RAW_COLUMNS}")


def write_site_csv(frame: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = frame[AGGREGATE_COLUMNS].copy()
    out["timestamp"] = out["timestamp"].astype(np.int64)
    out["rnti_count"] = out["rnti_count"].astype(np.int64)
    out.to_csv(path, index=False, float_format="%.6f")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class NormParams:
    columns: list[str]
    mins: list[float]
    maxs: list[float]

    @classmethod
    def fit(cls, values: np.ndarray, columns: Sequence[str]) -> "NormParams":
        values = np.asarray(values, dtype=np.float64)
        lo, hi = values.min(axis=0), values.max(axis=0)
        for c, a, b in zip(columns, lo, hi):
            if not a < b:
                raise DataError(f"column '{c}' is constant ({a}) on the training split; cannot normalize")
        return cls(list(columns), lo.tolist(), hi.tolist())

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mins), np.asarray(self.maxs)


def normalize(values: np.ndarray, params: NormParams, clamp: bool = True) -> np.ndarray:
    """v -> 2 (v - min) / (max - min) - 1, clamped to [-1, 1]."""
    lo, hi = params.as_arrays()
    out = 2.0 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0) if clamp else out


def denormalize(values: np.ndarray, params: NormParams) -> np.ndarray:
    lo, hi = params.as_arrays()
    return (np.asarray(values, dtype=np.float64) + 1.0) / 2.0 * (hi - lo) + lo


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


@dataclass
class WindowedDataset:
    """Sliding windows X[N, p, m] with targets Y[N, q].

    ``start_index[n]`` is the series row of X[n, 0]; ``target_index[n]`` the
    row of Y[n].  ``row_timestamps`` covers the whole source series.
    """

    X: np.ndarray
    Y: np.ndarray
    p: int
    dn: int
    start_index: np.ndarray
    target_index: np.ndarray
    row_timestamps: np.ndarray | None = None
    input_norm: NormParams | None = None
    target_norm: NormParams | None = None
    columns: list[str] = field(default_factory=lambda: list(INPUT_FEATURES))
    target_columns: list[str] = field(default_factory=lambda: list(TARGET_FEATURES))
    site: str = ""
    Y_last: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.X)

    @property
    def last_input_index(self) -> np.ndarray:
        return self.start_index + self.p - 1

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(
            self.X[idx],
            self.Y[idx],
            self.p,
            self.dn,
            self.start_index[idx],
            self.target_index[idx],
            self.row_timestamps,
            self.input_norm,
            self.target_norm,
            list(self.columns),
            list(self.target_columns),
            self.site,
            None if self.Y_last is None else self.Y_last[idx],
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"X": self.X, "Y": self.Y, "start_index": self.start_index, "target_index": self.target_index}
        if self.row_timestamps is not None:
            arrays["row_timestamps"] = self.row_timestamps
        if self.Y_last is not None:
            arrays["Y_last"] = self.Y_last
        np.savez(path.with_suffix(".npz"), **arrays)
        meta = {
            "p": self.p,
            "dn": self.dn,
            "site": self.site,
            "columns": self.columns,
            "target_columns": self.target_columns,
            "input_norm": asdict(self.input_norm) if self.input_norm else None,
            "target_norm": asdict(self.target_norm) if self.target_norm else None,
            "n": len(self),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "WindowedDataset":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with np.load(path.with_suffix(".npz")) as z:
            arrays = {k: z[k] for k in z.files}
        return cls(
            arrays["X"],
            arrays["Y"],
            meta["p"],
            meta["dn"],
            arrays["start_index"],
            arrays["target_index"],
            arrays.get("row_timestamps"),
            NormParams(**meta["input_norm"]) if meta["input_norm"] else None,
            NormParams(**meta["target_norm"]) if meta["target_norm"] else None,
            meta["columns"],
            meta["target_columns"],
            meta.get("site", ""),
            arrays.get("Y_last"),
        )


def min_length(p: int, dn: int) -> int:
    return p + dn + 1


def window(
    series: np.ndarray,
    targets: np.ndarray,
    p: int,
    dn: int,
    timestamps: np.ndarray | None = None,
    step_s: int = BUCKET_SECONDS,
) -> WindowedDataset:
    """Slide a length-``p`` window by one row.

    Sample n covers rows n..n+p-1 and targets row n+p+dn, i.e. dn=0 is the
    next bucket.  ``Y_last`` keeps the target row at n+p-1 for the
    persistence baseline.  With ``timestamps``, windows spanning a gap (a dropped
    bucket) are discarded.
    """
    series = np.asarray(series, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if p < 1 or dn < 0:
        raise ValueError(f"need p >= 1 and dn >= 0, got p={p}, dn={dn}")
    T = len(series)
    if len(targets) != T:
        raise DataError(f"series has {T} rows but targets has {len(targets)}")
    need = min_length(p, dn)
    if T < need:
        raise DataError(f"series too short: T={T}, need at least p+dn+1={need}")
    n = T - p - dn
    starts = np.arange(n)
    if timestamps is not None:
        ts = np.asarray(timestamps)
        ok_step = np.diff(ts) == step_s
        # a window is valid iff all p+dn consecutive steps up to its target are regular
        span = p + dn
        csum = np.concatenate([[0], np.cumsum(~ok_step)])
        bad = csum[starts + span] - csum[starts]
        starts = starts[bad == 0]
    view = np.lib.stride_tricks.sliding_window_view(series, p, axis=0)  # [T-p+1, m, p]
    X = np.ascontiguousarray(view[starts].transpose(0, 2, 1))
    tidx = starts + p + dn
    Y = targets[tidx]
    return WindowedDataset(
        X,
        Y,
        p,
        dn,
        starts.astype(np.int64),
        tidx.astype(np.int64),
        None if timestamps is None else np.asarray(timestamps),
        Y_last=targets[starts + p - 1],
    )


def split_row(timestamps: np.ndarray, train_days: float) -> int:
    """Index of the first row at or after ``train_days`` past the first timestamp."""
    ts = np.asarray(timestamps)
    cut = ts[0] + train_days * 86400
    return int(np.searchsorted(ts, cut, side="left"))


def make_dataset(
    frame: pd.DataFrame,
    p: int,
    dn: int,
    train_days: float,
    site: str = "",
    columns: Sequence[str] = INPUT_FEATURES,
    target_columns: Sequence[str] = TARGET_FEATURES,
) -> WindowedDataset:
    """Normalize with training-span statistics, then window the whole series."""
    if "thr_down" not in frame.columns:
        frame = add_throughput(frame)
    ts = frame["timestamp"].to_numpy(dtype=np.int64)
    _check_ordered(ts)
    cut = split_row(ts, train_days)
    if cut <= 1:
        raise DataError(f"training span of {train_days} days holds {cut} rows")
    raw_x = frame[list(columns)].to_numpy(dtype=np.float64)
    raw_y = frame[list(target_columns)].to_numpy(dtype=np.float64)
    xn = NormParams.fit(raw_x[:cut], columns)
    yn = NormParams.fit(raw_y[:cut], target_columns)
    ds = window(normalize(raw_x, xn), normalize(raw_y, yn), p, dn, timestamps=ts)
    ds.input_norm, ds.target_norm = xn, yn
    ds.columns, ds.target_columns = list(columns), list(target_columns)
    ds.site = site
    return ds


# ---------------------------------------------------------------------------
# exploratory statistics
# ---------------------------------------------------------------------------


def pearson_matrix(series: np.ndarray, columns: Iterable[str] | None = None) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"need a [T>=2, m] array, got shape {x.shape}")
    names = list(columns) if columns is not None else [str(i) for i in range(x.shape[1])]
    xc = x - x.mean(axis=0)
    ss = np.sqrt((xc * xc).sum(axis=0))
    for name, s in zip(names, ss):
        if s == 0:
            raise DataError(f"column '{name}' is constant; correlation undefined")
    z = xc / ss
    r = np.clip(z.T @ z, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return r
