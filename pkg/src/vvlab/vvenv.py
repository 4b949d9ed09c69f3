"""Volt-VAR control environment with interval-augmented observations.

One episode is one day of 48 half-hour steps. The agent observes last step's
realised nodal injections, this step's forecasts, the device statuses it left
in place, the time of day, and per-channel forecast interval bounds. The step
itself is scored on a power flow of the *true* injections.

Feature layout (every entry scaled into [-1, 1])::

    prev_p[1:], prev_q[1:]      realised net injections at t-1, non-slack buses
    fcst_p[1:], fcst_q[1:]      forecast net injections at t
    tap / tap_max, caps...      device statuses left by the previous action
    sin, cos                    2*pi*slot/48
    lower[c], upper[c]          interval bounds per channel (augmented part)

Injections and channel values are divided by the feeder's nominal peak
apparent load.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import powerflow as pf
from .conformal import IntervalSet, PredictionInterval, channel_matrix, channel_names, zero_width
from .netmodel import Network, build_admittance, q_limits, series_admittance
from .scenario import STEPS_PER_DAY, TimeSeriesSet, check_matches


@dataclass(frozen=True)
class CostConfig:
    c_p: float = 20.0  # $ per MW of loss
    c_v: float = 0.1  # $ per bus outside [v_lo, v_hi]
    c_u: float = 1.0  # $ per tap step or capacitor toggle
    v_lo: float = 0.95
    v_hi: float = 1.05
    reward_floor: float = -100.0  # non-convergent power flow


@dataclass(frozen=True)
class ActionVector:
    tap: int
    caps: tuple[int, ...]
    q_dg: np.ndarray  # kVar per inverter


@dataclass(frozen=True)
class EnvState:
    prev_p: np.ndarray
    prev_q: np.ndarray
    fcst_p: np.ndarray
    fcst_q: np.ndarray
    devices: np.ndarray  # tap / tap_max, then capacitor statuses
    time: np.ndarray  # (sin, cos)
    channel_forecast: np.ndarray  # normalized forecast per interval channel
    scale: float  # kW per unit feature

    def vector(self) -> np.ndarray:
        return np.concatenate([self.prev_p, self.prev_q, self.fcst_p, self.fcst_q, self.devices, self.time])


@dataclass(frozen=True)
class AdversarialState:
    state: EnvState
    lower: np.ndarray
    upper: np.ndarray

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.state.vector(), self.lower, self.upper])


@dataclass(frozen=True)
class StepInfo:
    timestep: int
    p_loss_mw: float
    violations: int
    switches: int
    converged: bool
    tap: int
    caps: tuple[int, ...]
    q_dg: tuple[float, ...]
    v_min: float
    v_max: float
    reward: float


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    state: AdversarialState
    done: bool
    info: StepInfo


def step_reward(p_loss_mw: float, violations: int, switches: int, converged: bool, costs: CostConfig) -> float:
    """Negative operating cost of one step; the fixed floor when the flow diverged."""
    if not converged:
        return costs.reward_floor
    return -(costs.c_p * p_loss_mw + costs.c_v * violations + costs.c_u * switches)


def reward_from_info(info: StepInfo, costs: CostConfig) -> float:
    return step_reward(info.p_loss_mw, info.violations, info.switches, info.converged, costs)


def augment(state: EnvState, intervals) -> AdversarialState:
    """Append normalized interval bounds to ``state``.

    Bounds are widened to include the forecast so that lower <= forecast <= upper
    holds channelwise even when the interval is centred elsewhere.
    """
    intervals = list(intervals)
    if len(intervals) != len(state.channel_forecast):
        raise ValueError(f"expected {len(state.channel_forecast)} intervals, got {len(intervals)}")
    lo = np.array([iv.lower for iv in intervals], dtype=float) / state.scale
    hi = np.array([iv.upper for iv in intervals], dtype=float) / state.scale
    f = state.channel_forecast
    return AdversarialState(state, np.clip(np.minimum(lo, f), -1, 1), np.clip(np.maximum(hi, f), -1, 1))


def vvr(total_violations: int, n_test: int, n_ph: int) -> float:
    """Voltage violation ratio: violations / (runs x buses)."""
    if n_test < 1 or n_ph < 1:
        raise ValueError("need at least one run and one bus")
    return total_violations / (n_test * n_ph)


@dataclass
class EpisodeMetrics:
    n_bus: int
    records: list[StepInfo] = field(default_factory=list)

    def add(self, info: StepInfo) -> None:
        self.records.append(info)

    @property
    def n_steps(self) -> int:
        return len(self.records)

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r.reward for r in self.records]))

    @property
    def loss_mean(self) -> float:
        return float(np.mean([r.p_loss_mw for r in self.records]))

    @property
    def loss_std(self) -> float:
        return float(np.std([r.p_loss_mw for r in self.records]))

    @property
    def total_violations(self) -> int:
        return int(sum(r.violations for r in self.records))

    @property
    def vvr(self) -> float:
        return vvr(self.total_violations, self.n_steps, self.n_bus)

    @property
    def v_min(self) -> float:
        return float(min(r.v_min for r in self.records))

    @property
    def v_max(self) -> float:
        return float(max(r.v_max for r in self.records))


EVAL_COLUMNS = ("timestep", "reward", "p_loss_mw", "violations", "switches", "converged", "tap", "cap_states")


def write_eval_log(records, path, n_inv: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS + tuple(f"q_dg_{k}" for k in range(n_inv)))
        for r in records:
            w.writerow([r.timestep, repr(r.reward), repr(r.p_loss_mw), r.violations, r.switches, int(r.converged),
                        r.tap, ";".join(str(c) for c in r.caps)] + [repr(q) for q in r.q_dg])


def read_eval_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class VVEnv:
    """Day-episode environment over aligned truth / forecast / interval series."""

    def __init__(self, net: Network, truth: TimeSeriesSet, forecast: TimeSeriesSet,
                 intervals: IntervalSet | None = None, costs: CostConfig = CostConfig()):
        check_matches(truth, net)
        check_matches(forecast, net)
        if len(truth) != len(forecast):
            raise ValueError("truth and forecast lengths differ")
        if intervals is None:
            intervals = zero_width(forecast, net)
        if len(intervals) != len(truth) or intervals.channels != channel_names(net):
            raise ValueError("intervals do not match the data or network channels")
        self.net = net
        self.costs = costs
        self.truth = truth
        self.forecast = forecast
        self.intervals = intervals
        self.n_days = len(truth) // STEPS_PER_DAY
        self.n_caps = len(net.capacitors)
        self.n_inv = len(net.inverters)
        self.reg = net.regulator
        self.scale = float(abs(complex(net.load_p.sum(), net.load_q.sum()))) or 1.0
        self._inv_bus = np.array([net.index(inv.bus) for inv in net.inverters], dtype=int)
        self._branches = [(i, j) for i, j, _ in series_admittance(net)]
        self._true_p, self._true_q = self._net_injection(truth)
        self._fc_p, self._fc_q = self._net_injection(forecast)
        self._fc_channels = channel_matrix(forecast, net) / self.scale
        self._ybus: dict[tuple[int, ...], np.ndarray] = {}
        self._day = None
        self._k = 0

    # -- helpers -----------------------------------------------------------
    def _net_injection(self, ts):
        p = -np.asarray(ts.load_p, dtype=float).copy()
        q = -np.asarray(ts.load_q, dtype=float).copy()
        for k, b in enumerate(self._inv_bus):
            p[:, b] += ts.pv[:, k]
        return p, q

    def admittance(self, caps) -> np.ndarray:
        key = tuple(int(c) for c in caps)
        Y = self._ybus.get(key)
        if Y is None:
            Y = self._ybus[key] = build_admittance(self.net, np.array(key, dtype=int))
        return Y

    @property
    def n_channels(self) -> int:
        return len(self.intervals.channels)

    @property
    def state_dim(self) -> int:
        return 4 * (self.net.n_bus - 1) + 1 + self.n_caps + 2

    @property
    def obs_dim(self) -> int:
        return self.state_dim + 2 * self.n_channels

    @property
    def global_step(self) -> int:
        return self._day * STEPS_PER_DAY + self._k

    def forecast_pv(self) -> np.ndarray:
        """PV forecast (kW) for the step about to be taken."""
        g = min(self.global_step, len(self.truth) - 1)
        return np.asarray(self.forecast.pv[g], dtype=float)

    def q_limits_forecast(self) -> np.ndarray:
        return q_limits(self.net, self.forecast_pv())

    # -- API ---------------------------------------------------------------
    def reset(self, day: int) -> AdversarialState:
        if not 0 <= day < self.n_days:
            raise IndexError(f"day {day} outside [0, {self.n_days})")
        self._day = day
        self._k = 0
        self._tap = 0
        self._caps = (0,) * self.n_caps
        self._q_prev = np.zeros(self.n_inv)
        return self.observe()

    def env_state(self) -> EnvState:
        g = min(self.global_step, len(self.truth) - 1)
        s = self.scale
        if g >= 1:
            prev_p = self._true_p[g - 1]
            prev_q = self._true_q[g - 1].copy()
            prev_q[self._inv_bus] += self._q_prev
        else:
            prev_p, prev_q = self._fc_p[g], self._fc_q[g]
        slot = self._k % STEPS_PER_DAY
        angle = 2.0 * np.pi * slot / STEPS_PER_DAY
        devices = np.concatenate([[self._tap / max(abs(self.reg.tap_max), abs(self.reg.tap_min))],
                                  np.asarray(self._caps, dtype=float)])
        clip = lambda a: np.clip(np.asarray(a, dtype=float)[1:] / s, -1.0, 1.0)  # noqa: E731
        return EnvState(
            prev_p=clip(prev_p), prev_q=clip(prev_q),
            fcst_p=clip(self._fc_p[g]), fcst_q=clip(self._fc_q[g]),
            devices=devices, time=np.array([np.sin(angle), np.cos(angle)]),
            channel_forecast=np.clip(self._fc_channels[g], -1.0, 1.0), scale=s,
        )

    def observe(self) -> AdversarialState:
        g = min(self.global_step, len(self.truth) - 1)
        return augment(self.env_state(), self.intervals.at(g))

    def evaluate_action(self, action: ActionVector, p_kw, q_kvar, pv_kw):
        """Power-flow score of ``action`` on explicit injections (no state change).

        Returns ``(solution, p_loss_mw, violations, q_applied)``.
        """
        q_dg = np.clip(np.asarray(action.q_dg, dtype=float), -q_limits(self.net, pv_kw), q_limits(self.net, pv_kw))
        q = np.array(q_kvar, dtype=float)
        q[self._inv_bus] += q_dg
        Y = self.admittance(action.caps)
        sol = pf.solve(Y, self.net.kw_to_pu(p_kw), self.net.kw_to_pu(q), self.reg.voltage(action.tap))
        if not sol.converged:
            return sol, float("nan"), self.net.n_bus, q_dg
        loss = pf.compute_losses(Y, sol, self._branches, self.net.base_mva).p_loss
        return sol, loss, pf.count_violations(sol.vm, self.costs.v_lo, self.costs.v_hi), q_dg

    def step(self, action: ActionVector) -> StepOutcome:
        if self._day is None:
            raise RuntimeError("call reset() before step()")
        if self._k >= STEPS_PER_DAY:
            raise RuntimeError("episode finished; call reset()")
        tap = int(action.tap)
        if not self.reg.tap_min <= tap <= self.reg.tap_max:
            raise ValueError(f"tap {tap} out of range")
        caps = tuple(int(c) for c in action.caps)
        if len(caps) != self.n_caps or any(c not in (0, 1) for c in caps):
            raise ValueError("capacitor statuses must be a binary vector, one per bank")
        g = self.global_step
        sol, loss, viol, q_dg = self.evaluate_action(
            ActionVector(tap, caps, action.q_dg), self._true_p[g], self._true_q[g], self.truth.pv[g])
        switches = abs(tap - self._tap) + sum(abs(a - b) for a, b in zip(caps, self._caps))
        reward = step_reward(loss, viol, switches, sol.converged, self.costs)
        info = StepInfo(
            timestep=g, p_loss_mw=loss, violations=viol, switches=switches, converged=sol.converged,
            tap=tap, caps=caps, q_dg=tuple(float(x) for x in q_dg),
            v_min=float(sol.vm.min()), v_max=float(sol.vm.max()), reward=reward,
        )
        self._tap, self._caps, self._q_prev = tap, caps, q_dg
        self._k += 1
        done = self._k == STEPS_PER_DAY
        return StepOutcome(reward, self.observe(), done, info)
