"""Synthetic PS/EB/LC-like site series.

Each site is a 24 h load template modulated by weekday effects, a slow AR(1)
latent process and white noise.  Event windows (LC) push uplink above
downlink.  Everything is a pure function of (profile, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .pipeline import BUCKET_SECONDS, DciAggregate, add_throughput, throughput_bits

BUCKETS_PER_DAY = 86400 // BUCKET_SECONDS
SITES = ("PS", "EB", "LC")


@dataclass
class SiteEvent:
    day: int
    hour: float
    duration: float
    uplink_multiplier: float


@dataclass
class SiteProfile:
    name: str
    days: int
    base_load: list[float]
    start: int = 1546819200  # a Monday, 00:00 UTC
    weekend_scale: float = 1.0
    weekend_night_boost: float = 1.0
    weekend_night_hours: tuple[float, float] = (22, 4)
    events: list[SiteEvent] = field(default_factory=list)
    ar_phi: float = 0.98
    ar_amp: float = 0.18
    scales: dict[str, float] = field(default_factory=dict)
    noise_std: dict[str, float] = field(default_factory=dict)
    missing_rate: float = 0.0006
    note: str = ""

    def __post_init__(self):
        if len(self.base_load) != 24:
            raise ValueError(f"{self.name}: base_load needs 24 hourly values, got {len(self.base_load)}")
        if not 0.0 <= self.missing_rate <= 0.002:
            raise ValueError(f"{self.name}: missing_rate must be in [0, 0.002], got {self.missing_rate}")
        if self.days < 1:
            raise ValueError(f"{self.name}: days must be positive")
        self.events = [e if isinstance(e, SiteEvent) else SiteEvent(**e) for e in self.events]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SiteProfile":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, path: str | Path) -> "SiteProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_profile(name_or_path: str, **overrides) -> SiteProfile:
    """Built-in profile by site name (PS, EB, LC) or a JSON file path."""
    if name_or_path.upper() in SITES and not Path(name_or_path).exists():
        text = resources.files("traffic_dtl.resources.profiles").joinpath(f"{name_or_path.upper()}.json").read_text()
        d = json.loads(text)
    else:
        d = json.loads(Path(name_or_path).read_text())
    d.update({k: v for k, v in overrides.items() if v is not None})
    return SiteProfile.from_dict(d)


def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    eta = rng.standard_normal(n) * np.sqrt(1.0 - phi * phi)
    out = np.empty(n)
    prev = rng.standard_normal()
    for i in range(n):
        prev = phi * prev + eta[i]
        out[i] = prev
    return out


def _activity(profile: SiteProfile, t: np.ndarray) -> np.ndarray:
    hour = (t % BUCKETS_PER_DAY) * BUCKET_SECONDS / 3600.0
    day = t // BUCKETS_PER_DAY
    weekday = day % 7  # start is a Monday
    tmpl = np.asarray(profile.base_load + profile.base_load[:1], dtype=np.float64)
    load = np.interp(hour, np.arange(25), tmpl)
    weekend = weekday >= 5
    load = np.where(weekend, load * profile.weekend_scale, load)
    start_h, end_h = profile.weekend_night_hours
    # Friday and Saturday evenings, plus the small hours of the following day.
    late = (hour >= start_h) & np.isin(weekday, (4, 5))
    early = (hour < end_h) & np.isin(weekday, (5, 6))
    return np.where(late | early, load * profile.weekend_night_boost, load)


def _event_mask(profile: SiteProfile, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mult = np.ones(len(t))
    hours = t * BUCKET_SECONDS / 3600.0
    for ev in profile.events:
        start = ev.day * 24 + ev.hour
        inside = (hours >= start) & (hours < start + ev.duration)
        mult[inside] = np.maximum(mult[inside], ev.uplink_multiplier)
    return mult > 1.0, mult


def generate_frame(profile: SiteProfile, seed: int = 0) -> pd.DataFrame:
    """Two-minute aggregates (with derived throughput) as a DataFrame."""
    rng = np.random.default_rng(seed)
    n = profile.days * BUCKETS_PER_DAY
    t = np.arange(n)
    sc = {"rnti_count": 100.0, "rnti_floor": 5.0, "rb_down": 60.0, "rb_up": 20.0,
          "mcs_down": 16.0, "mcs_up": 12.0, "mcs_rb_slope": 2.5, **profile.scales}
    ns = {"rnti_count": 0.06, "rb_down": 0.07, "rb_up": 0.10, "mcs_down": 0.05, "mcs_up": 0.06, **profile.noise_std}

    users = _ar1(rng, n, profile.ar_phi)
    uplink = _ar1(rng, n, profile.ar_phi)
    radio = _ar1(rng, n, profile.ar_phi)
    act = np.clip(_activity(profile, t) * (1.0 + profile.ar_amp * users), 0.0, None)
    events, mult = _event_mask(profile, t)

    def noise(key, scale):
        return rng.standard_normal(n) * ns[key] * scale

    rnti = sc["rnti_floor"] + sc["rnti_count"] * act * np.where(events, 1.5, 1.0) + noise("rnti_count", sc["rnti_count"])
    rnti = np.clip(np.round(rnti), 0, None)

    rb_down = sc["rb_down"] * act + noise("rb_down", sc["rb_down"])
    up_act = 0.55 * act + 0.45 * np.clip(0.5 + 0.25 * uplink, 0.0, None)
    rb_up = sc["rb_up"] * up_act * mult + noise("rb_up", sc["rb_up"])
    rb_down = np.where(events, rb_down * 0.6, rb_down)
    rb_down = np.clip(rb_down, 0.0, 100.0)
    rb_up = np.clip(rb_up, 0.0, 100.0)

    # MCS falls as the cell loads up.
    zd = (rb_down - rb_down.mean()) / (rb_down.std() + 1e-12)
    zu = (rb_up - rb_up.mean()) / (rb_up.std() + 1e-12)
    mcs_down = sc["mcs_down"] - sc["mcs_rb_slope"] * zd + 1.0 * radio + noise("mcs_down", sc["mcs_down"])
    mcs_up = sc["mcs_up"] - sc["mcs_rb_slope"] * zu + 1.0 * radio + noise("mcs_up", sc["mcs_up"])
    mcs_down = np.clip(mcs_down, 0.0, 31.0)
    mcs_up = np.clip(mcs_up, 0.0, 31.0)
    # During events uplink must carry more bits than downlink.
    mcs_up = np.where(events, np.maximum(mcs_up, mcs_down), mcs_up)
    if events.any():
        thr_d = throughput_bits(mcs_down, rb_down)
        thr_u = throughput_bits(mcs_up, rb_up)
        over = events & (thr_d >= 0.8 * thr_u)
        rb_down = np.where(over, rb_down * np.divide(0.8 * thr_u, thr_d, out=np.zeros(n), where=thr_d > 0), rb_down)

    keep = rng.random(n) >= profile.missing_rate
    frame = pd.DataFrame(
        {
            "timestamp": profile.start + t * BUCKET_SECONDS,
            "rnti_count": rnti.astype(np.int64),
            "mcs_down": mcs_down,
            "mcs_up": mcs_up,
            "rb_down": rb_down,
            "rb_up": rb_up,
        }
    )[keep].reset_index(drop=True)
    return add_throughput(frame)


def generate(profile: SiteProfile, seed: int = 0) -> list[DciAggregate]:
    frame = generate_frame(profile, seed)
    return [
        DciAggregate(int(r.timestamp), int(r.rnti_count), r.mcs_down, r.mcs_up, r.rb_down, r.rb_up, r.thr_down, r.thr_up)
        for r in frame.itertuples(index=False)
    ]


def event_mask(profile: SiteProfile, timestamps: np.ndarray) -> np.ndarray:
    t = (np.asarray(timestamps) - profile.start) // BUCKET_SECONDS
    return _event_mask(profile, t)[0]
