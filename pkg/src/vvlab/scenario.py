"""Synthetic half-hourly load and PV series, noisy forecasts, splits and CSV I/O.

Load at each step is Gaussian around ``nominal * template(slot)`` with a
relative standard deviation ``load_sigma``; active and reactive parts share
the draw so each bus keeps its power factor. PV output is
``rated_p * pv_peak * bell(slot) * phi`` with ``log(phi) ~ N(pv_mu, pv_sigma)``,
clipped to ``[0, rated_p]``; the bell is a cosine between 06:00 and 18:00.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .netmodel import Network

STEPS_PER_DAY = 48
STEP_MINUTES = 30
DEFAULT_START = "2024-01-01T00:00"


def load_template() -> np.ndarray:
    doc = json.loads((resources.files("vvlab") / "fixtures" / "load_profile.json").read_text())
    values = np.array(doc["values"], dtype=float)
    assert values.shape == (STEPS_PER_DAY,)
    return values


def pv_bell(slot) -> np.ndarray:
    """Clear-sky shape in [0, 1]: cosine bell, zero outside 06:00-18:00."""
    hours = np.asarray(slot, dtype=float) * STEP_MINUTES / 60.0
    return np.where((hours > 6.0) & (hours < 18.0), np.cos(np.pi * (hours - 12.0) / 12.0), 0.0)


@dataclass(frozen=True)
class ScenarioConfig:
    load_sigma: float = 0.05
    pv_sigma: float = 0.2
    pv_mu: float | None = None  # None -> -pv_sigma**2 / 2 (unit-mean irradiance factor)
    pv_peak: float = 0.85
    forecast_noise: float = 0.05
    start: str = DEFAULT_START

    @property
    def irradiance_mu(self) -> float:
        return -0.5 * self.pv_sigma ** 2 if self.pv_mu is None else self.pv_mu

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TimeSeriesSet:
    """Aligned per-bus load (kW/kVar) and per-inverter PV (kW) series."""
    timestamps: np.ndarray  # datetime64[m]
    load_p: np.ndarray  # (T, n_bus)
    load_q: np.ndarray  # (T, n_bus)
    pv: np.ndarray  # (T, n_inv)
    bus_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        T = len(self.timestamps)
        for name in ("load_p", "load_q", "pv"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != T:
                raise ValueError(f"{name} must be 2-D with {T} rows")
        if self.load_p.shape != self.load_q.shape:
            raise ValueError("load_p and load_q shapes differ")
        for arr in (self.timestamps, self.load_p, self.load_q, self.pv):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n_days(self) -> int:
        return len(self) // STEPS_PER_DAY

    def slice(self, start: int, stop: int):
        return type(self)(
            timestamps=self.timestamps[start:stop].copy(),
            load_p=self.load_p[start:stop].copy(),
            load_q=self.load_q[start:stop].copy(),
            pv=self.pv[start:stop].copy(),
            bus_ids=self.bus_ids,
        )


class ForecastSet(TimeSeriesSet):
    """Same layout as :class:`TimeSeriesSet`, holding forecasts."""


def _timestamps(start: str, n: int) -> np.ndarray:
    t0 = np.datetime64(start, "m")
    return t0 + np.arange(n) * np.timedelta64(STEP_MINUTES, "m")


def generate(net: Network, days: int, seed: int, config: ScenarioConfig = ScenarioConfig()) -> TimeSeriesSet:
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = np.random.default_rng(seed)
    T = days * STEPS_PER_DAY
    slot = np.arange(T) % STEPS_PER_DAY
    profile = load_template()[slot]
    n_bus = net.n_bus
    factor = 1.0 + config.load_sigma * rng.standard_normal((T, n_bus))
    scale = np.maximum(profile[:, None] * factor, 0.0)
    load_p = scale * net.load_p[None, :]
    load_q = scale * net.load_q[None, :]
    n_inv = len(net.inverters)
    rated = np.array([inv.rated_p for inv in net.inverters])
    phi = np.exp(config.irradiance_mu + config.pv_sigma * rng.standard_normal((T, n_inv)))
    pv = rated[None, :] * config.pv_peak * pv_bell(slot)[:, None] * phi
    pv = np.clip(pv, 0.0, rated[None, :])
    return TimeSeriesSet(_timestamps(config.start, T), load_p, load_q, pv, tuple(net.bus_ids))


def make_forecasts(truth: TimeSeriesSet, noise_std: float, seed: int) -> ForecastSet:
    """Multiplicative Gaussian forecast error; zeros stay zero."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    T, n_bus = truth.load_p.shape
    load_err = np.maximum(1.0 + noise_std * rng.standard_normal((T, n_bus)), 0.0)
    pv_err = 1.0 + noise_std * rng.standard_normal(truth.pv.shape)
    return ForecastSet(
        timestamps=truth.timestamps.copy(),
        load_p=truth.load_p * load_err,
        load_q=truth.load_q * load_err,
        pv=np.maximum(truth.pv * pv_err, 0.0),
        bus_ids=truth.bus_ids,
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    def boundary(self, length: int) -> int:
        return math.floor(self.train_fraction * length)


def split(ts: TimeSeriesSet, spec: SplitSpec = SplitSpec()):
    """Chronological (train, test) partition at floor(fraction * length)."""
    if len(ts) < 2:
        raise ValueError("need at least two timesteps to split")
    k = spec.boundary(len(ts))
    return ts.slice(0, k), ts.slice(k, len(ts))


def split_days(ts: TimeSeriesSet, spec: SplitSpec = SplitSpec()):
    """Like :func:`split` but with the boundary rounded down to a whole day."""
    if ts.n_days < 2:
        raise ValueError("need at least two days to split by day")
    k = max(1, min(ts.n_days - 1, spec.boundary(ts.n_days))) * STEPS_PER_DAY
    return ts.slice(0, k), ts.slice(k, ts.n_days * STEPS_PER_DAY)


CSV_COLUMNS = ("timestamp", "entity_type", "entity_id", "p_kw", "q_kvar")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_timeseries(ts: TimeSeriesSet, path) -> None:
    """Long-format CSV: one row per (timestamp, load bus | PV unit)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t, stamp in enumerate(ts.timestamps):
            iso = str(stamp)
            for k, bus in enumerate(ts.bus_ids):
                w.writerow((iso, "load", bus, _fmt(ts.load_p[t, k]), _fmt(ts.load_q[t, k])))
            for k in range(ts.pv.shape[1]):
                w.writerow((iso, "pv", k, _fmt(ts.pv[t, k]), _fmt(0.0)))


def read_timeseries(path, cls=TimeSeriesSet) -> TimeSeriesSet:
    stamps: dict[str, int] = {}
    loads: dict[int, dict[int, tuple[float, float]]] = {}
    pvs: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            t = stamps.setdefault(row["timestamp"], len(stamps))
            try:
                eid = int(row["entity_id"])
                p, q = float(row["p_kw"]), float(row["q_kvar"])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if row["entity_type"] == "load":
                loads.setdefault(eid, {})[t] = (p, q)
            elif row["entity_type"] == "pv":
                pvs.setdefault(eid, {})[t] = p
            else:
                raise ValueError(f"{path}: line {lineno}: unknown entity_type {row['entity_type']!r}")
    T = len(stamps)
    bus_ids = tuple(loads)
    load_p = np.zeros((T, len(bus_ids)))
    load_q = np.zeros((T, len(bus_ids)))
    for k, bus in enumerate(bus_ids):
        if len(loads[bus]) != T:
            raise ValueError(f"{path}: load {bus} is missing timesteps")
        for t, (p, q) in loads[bus].items():
            load_p[t, k], load_q[t, k] = p, q
    pv = np.zeros((T, len(pvs)))
    for k in sorted(pvs):
        if k >= len(pvs) or len(pvs[k]) != T:
            raise ValueError(f"{path}: PV unit ids must be 0..n-1 with every timestep present")
        for t, p in pvs[k].items():
            pv[t, k] = p
    timestamps = np.array([np.datetime64(s, "m") for s in stamps], dtype="datetime64[m]")
    return cls(timestamps, load_p, load_q, pv, bus_ids)


def check_matches(ts: TimeSeriesSet, net: Network) -> None:
    if tuple(ts.bus_ids) != tuple(net.bus_ids):
        raise ValueError("time series bus ids do not match the network")
    if ts.pv.shape[1] != len(net.inverters):
        raise ValueError("time series PV unit count does not match the network")


def write_manifest(path, *, seed: int, days: int, config: ScenarioConfig, network: str, created: str) -> None:
    doc = {"seed": seed, "days": days, "network": network, "config": config.to_dict(), "created": created}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
