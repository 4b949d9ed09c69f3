"""Ensemble bootstrap prediction intervals (EnbPI) for one-step-ahead forecasts.

Each channel gets ``B`` ridge regressors on ``M`` lagged values, each fitted
on a bootstrap resample of all (window -> next value) pairs. A training point
is predicted only by the regressors that never saw it; new points use the
whole ensemble. Interval half-widths come from a sliding window of absolute
out-of-bag residuals.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

NEW = "new"


@dataclass(frozen=True)
class EnsembleModel:
    coef: np.ndarray  # (B, M)
    intercept: np.ndarray  # (B,)
    in_sample: np.ndarray  # (B, n_train) bool
    lags: int
    ridge: float
    train_x: np.ndarray  # (n_train, M)
    train_y: np.ndarray  # (n_train,)

    @property
    def n_estimators(self) -> int:
        return self.coef.shape[0]

    @property
    def n_train(self) -> int:
        return self.in_sample.shape[1]


@dataclass(frozen=True)
class PredictionInterval:
    point: float
    lower: float
    upper: float
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.lower <= self.point <= self.upper:
            raise ValueError("interval must satisfy lower <= point <= upper")

    @property
    def width(self) -> float:
        return self.upper - self.lower


class ResidualWindow:
    """FIFO of the most recent ``capacity`` absolute residuals."""

    def __init__(self, capacity: int = 200, values=()):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf = deque(maxlen=capacity)
        for v in values:
            self.push(v)

    def push(self, value: float) -> None:
        if not value >= 0:
            raise ValueError("residuals must be non-negative")
        self._buf.append(float(value))

    def values(self) -> np.ndarray:
        return np.fromiter(self._buf, dtype=float, count=len(self._buf))

    def __len__(self) -> int:
        return len(self._buf)


def lagged_pairs(series, lags: int):
    """Rows ``[y_{t-M}, ..., y_{t-1}]`` with targets ``y_t`` for t = M..len-1."""
    y = np.asarray(series, dtype=float)
    n = len(y) - lags
    if n <= 0:
        raise ValueError("series shorter than the lag order")
    X = np.lib.stride_tricks.sliding_window_view(y, lags)[:n].copy()
    return X, y[lags:].copy()


def _ridge(X, y, lam):
    # centred ridge with an unpenalized intercept; lstsq handles rank deficiency at lam = 0
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    if lam > 0:
        A = np.vstack([Xc, math.sqrt(lam) * np.eye(X.shape[1])])
        b = np.concatenate([y - ym, np.zeros(X.shape[1])])
    else:
        A, b = Xc, y - ym
    w = np.linalg.lstsq(A, b, rcond=None)[0]
    return w, ym - xm @ w


def _bootstrap_indices(rng, n, B):
    idx = rng.integers(0, n, size=(B, n))
    in_sample = np.zeros((B, n), dtype=bool)
    for b in range(B):
        in_sample[b, idx[b]] = True
    # every point must be left out by at least one estimator; replacements are
    # drawn from the same resample so no other point loses its exclusion
    for i in np.flatnonzero(in_sample.all(axis=0)):
        b = int(rng.integers(0, B))
        hits = idx[b] == i
        pool = idx[b][~hits]
        if pool.size == 0:
            pool = np.delete(np.arange(n), i)
        idx[b, hits] = rng.choice(pool, size=int(hits.sum()))
        in_sample[b, i] = False
    return idx, in_sample


def fit(history, B: int = 20, M: int = 48, seed: int = 0, ridge: float = 1e-3) -> EnsembleModel:
    history = np.asarray(history, dtype=float)
    if B < 2:
        raise ValueError("need at least two bootstrap estimators")
    if len(history) <= M + 10:
        raise ValueError(f"history of length {len(history)} too short for lag order {M}")
    X, y = lagged_pairs(history, M)
    rng = np.random.default_rng(seed)
    idx, in_sample = _bootstrap_indices(rng, len(y), B)
    coef = np.empty((B, M))
    intercept = np.empty(B)
    for b in range(B):
        coef[b], intercept[b] = _ridge(X[idx[b]], y[idx[b]], ridge)
    return EnsembleModel(coef, intercept, in_sample, M, ridge, X, y)


def loo_predict(model: EnsembleModel, x, index=NEW) -> float:
    """Mean prediction over the estimators whose resample excludes ``index``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.lags,):
        raise ValueError(f"lag window must have length {model.lags}")
    preds = model.coef @ x + model.intercept
    if index == NEW:
        return float(preds.mean())
    keep = ~model.in_sample[:, index]
    if not keep.any():
        raise ValueError(f"no estimator excludes training index {index}")
    return float(preds[keep].mean())


def train_residuals(model: EnsembleModel) -> np.ndarray:
    """Absolute out-of-bag residuals on every training pair, in time order."""
    preds = model.train_x @ model.coef.T + model.intercept  # (n, B)
    out = ~model.in_sample.T
    loo = (preds * out).sum(axis=1) / out.sum(axis=1)
    return np.abs(model.train_y - loo)


def quantile_rank(n: int, alpha: float) -> int:
    """1-based order statistic ceil((1 - alpha)(n + 1)), capped at n."""
    return min(n, math.ceil((1.0 - alpha) * (n + 1)))


def interval(model: EnsembleModel, x, window: ResidualWindow, alpha: float = 0.05, index=NEW) -> PredictionInterval:
    if len(window) == 0:
        raise ValueError("residual window is empty")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    point = loo_predict(model, x, index)
    res = np.sort(window.values())
    half = float(res[quantile_rank(len(res), alpha) - 1])
    return PredictionInterval(point, point - half, point + half, alpha)


def update(window: ResidualWindow, truth: float, point: float) -> ResidualWindow:
    window.push(abs(truth - point))
    return window


def sequential_intervals(model: EnsembleModel, series, alpha: float = 0.05, window_size: int = 200,
                         prefix=None):
    """One-step-ahead intervals for every step of ``series``.

    ``series`` continues from the fitted history when ``prefix`` (the tail of
    that history) is given. Steps with fewer than ``M`` lags available are
    centred on the training mean. Without a prefix ``series`` is taken to be
    the fitted history itself and its steps use out-of-bag predictions.

    The window starts from the last ``window_size`` out-of-bag training
    residuals and receives each realised residual after its step, so on new
    data interval ``t`` only uses truth up to ``t - 1``.

    Returns arrays ``(point, lower, upper)``.
    """
    series = np.asarray(series, dtype=float)
    prefix = np.zeros(0) if prefix is None else np.asarray(prefix, dtype=float)[-model.lags:]
    full = np.concatenate([prefix, series])
    off = len(prefix)
    window = ResidualWindow(window_size, train_residuals(model)[-window_size:])
    fallback = float(model.train_y.mean())
    T = len(series)
    point = np.empty(T)
    lower = np.empty(T)
    upper = np.empty(T)
    for t in range(T):
        pos = off + t
        if pos >= model.lags:
            x = full[pos - model.lags:pos]
            k = t - model.lags
            idx = k if prefix.size == 0 and 0 <= k < model.n_train else NEW
            pi = interval(model, x, window, alpha, idx)
        else:
            res = np.sort(window.values())
            half = float(res[quantile_rank(len(res), alpha) - 1])
            pi = PredictionInterval(fallback, fallback - half, fallback + half, alpha)
        point[t], lower[t], upper[t] = pi.point, pi.lower, pi.upper
        update(window, series[t], pi.point)
    return point, lower, upper


@dataclass(frozen=True)
class ConformalConfig:
    n_estimators: int = 20
    lags: int = 48
    window: int = 200
    alpha: float = 0.05
    ridge: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class IntervalSet:
    """Per-channel one-step-ahead intervals aligned to a time index (kW)."""
    timestamps: np.ndarray
    channels: tuple[str, ...]
    point: np.ndarray  # (T, C)
    lower: np.ndarray
    upper: np.ndarray
    alpha: float

    def __len__(self) -> int:
        return len(self.timestamps)

    def slice(self, start: int, stop: int) -> "IntervalSet":
        return IntervalSet(self.timestamps[start:stop], self.channels, self.point[start:stop],
                           self.lower[start:stop], self.upper[start:stop], self.alpha)

    def at(self, t: int) -> list[PredictionInterval]:
        return [PredictionInterval(float(p), float(lo), float(hi), self.alpha)
                for p, lo, hi in zip(self.point[t], self.lower[t], self.upper[t])]


def channel_names(net) -> tuple[str, ...]:
    """Load channels (active power of each loaded bus) then one channel per PV unit."""
    return tuple([f"load:{b}" for b in net.load_buses] + [f"pv:{k}" for k in range(len(net.inverters))])


def channel_matrix(ts, net) -> np.ndarray:
    cols = [ts.load_p[:, net.index(b)] for b in net.load_buses]
    cols += [ts.pv[:, k] for k in range(len(net.inverters))]
    return np.column_stack(cols) if cols else np.zeros((len(ts), 0))


def fit_channels(train, test, net, config: ConformalConfig = ConformalConfig()):
    """Fit one ensemble per channel on ``train``; return intervals for both periods.

    Physical channels are non-negative, so points and bounds are clipped at 0.
    """
    names = channel_names(net)
    ytr = channel_matrix(train, net)
    yte = channel_matrix(test, net) if test is not None else None
    out_tr = [np.zeros((len(train), len(names))) for _ in range(3)]
    out_te = [np.zeros((len(test), len(names))) for _ in range(3)] if test is not None else None
    for c in range(len(names)):
        model = fit(ytr[:, c], B=config.n_estimators, M=config.lags, seed=config.seed + c, ridge=config.ridge)
        for arr, val in zip(out_tr, sequential_intervals(model, ytr[:, c], config.alpha, config.window)):
            arr[:, c] = val
        if test is not None:
            res = sequential_intervals(model, yte[:, c], config.alpha, config.window, prefix=ytr[:, c])
            for arr, val in zip(out_te, res):
                arr[:, c] = val

    def pack(ts, arrs):
        point, lower, upper = (np.maximum(a, 0.0) for a in arrs)
        return IntervalSet(ts.timestamps.copy(), names, point, lower, upper, config.alpha)

    return pack(train, out_tr), (pack(test, out_te) if test is not None else None)


def zero_width(forecast, net, alpha: float = 0.05) -> IntervalSet:
    """Degenerate intervals collapsed onto the forecast (ablation input)."""
    vals = channel_matrix(forecast, net)
    return IntervalSet(forecast.timestamps.copy(), channel_names(net), vals, vals.copy(), vals.copy(), alpha)


INTERVAL_COLUMNS = ("timestamp", "channel", "point", "lower", "upper", "alpha")


def write_intervals(sets, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERVAL_COLUMNS)
        for iv in sets:
            for t, stamp in enumerate(iv.timestamps):
                for c, name in enumerate(iv.channels):
                    w.writerow((str(stamp), name, repr(float(iv.point[t, c])), repr(float(iv.lower[t, c])),
                                repr(float(iv.upper[t, c])), repr(float(iv.alpha))))


def read_intervals(path) -> IntervalSet:
    stamps: dict[str, int] = {}
    chans: dict[str, int] = {}
    rows = []
    alpha = None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != INTERVAL_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(INTERVAL_COLUMNS)}")
        for row in reader:
            t = stamps.setdefault(row["timestamp"], len(stamps))
            c = chans.setdefault(row["channel"], len(chans))
            rows.append((t, c, float(row["point"]), float(row["lower"]), float(row["upper"])))
            alpha = float(row["alpha"])
    T, C = len(stamps), len(chans)
    arrs = [np.full((T, C), np.nan) for _ in range(3)]
    for t, c, *vals in rows:
        for arr, v in zip(arrs, vals):
            arr[t, c] = v
    if any(np.isnan(a).any() for a in arrs):
        raise ValueError(f"{path}: some (timestamp, channel) pairs are missing")
    timestamps = np.array([np.datetime64(s, "m") for s in stamps], dtype="datetime64[m]")
    return IntervalSet(timestamps, tuple(chans), *arrs, alpha)
