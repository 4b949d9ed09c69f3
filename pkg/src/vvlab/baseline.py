"""Brute-force reference controllers on a discretized action grid.

``exhaustive_vvo`` solves one snapshot by scanning every grid action;
``robust_exhaustive`` minimizes the worst objective over corners of an interval
box. Both ignore switching cost (they are single-step). Actions are scanned in
lexicographic order (tap, capacitor statuses, inverter q levels) and a later
action only wins on a strictly smaller objective.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import powerflow as pf
from .netmodel import Network, build_admittance, q_limits, series_admittance
from .vvenv import ActionVector, CostConfig

GUARD = 10 ** 6


class GridTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Snapshot:
    """Injections at one instant: loads per bus (kW, kVar) and PV output per inverter (kW)."""
    load_p: np.ndarray
    load_q: np.ndarray
    pv: np.ndarray


@dataclass(frozen=True)
class GridAction:
    tap: int
    caps: tuple[int, ...]
    q_frac: tuple[float, ...]  # fraction of each inverter's headroom

    def to_vector(self, q_limit) -> ActionVector:
        return ActionVector(self.tap, self.caps, np.asarray(self.q_frac) * np.asarray(q_limit, dtype=float))


@dataclass(frozen=True)
class ActionGrid:
    taps: tuple[int, ...]
    n_caps: int
    n_inv: int
    q_levels: int = 5

    def __post_init__(self):
        if not self.taps:
            raise ValueError("need at least one tap candidate")
        if self.q_levels < 1:
            raise ValueError("q_levels must be positive")
        if self.size > GUARD:
            raise GridTooLarge(f"grid has {self.size} actions (limit {GUARD})")

    @classmethod
    def for_network(cls, net: Network, taps=None, q_levels: int = 5) -> "ActionGrid":
        reg = net.regulator
        taps = tuple(range(reg.tap_min, reg.tap_max + 1)) if taps is None else tuple(int(t) for t in taps)
        for t in taps:
            reg.voltage(t)  # range check
        return cls(taps, len(net.capacitors), len(net.inverters), q_levels)

    @property
    def fractions(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.q_levels) if self.q_levels > 1 else np.zeros(1)

    @property
    def size(self) -> int:
        return len(self.taps) * 2 ** self.n_caps * self.q_levels ** self.n_inv

    def __iter__(self):
        fr = [float(f) for f in self.fractions]
        for tap, caps, q in itertools.product(self.taps, itertools.product((0, 1), repeat=self.n_caps),
                                              itertools.product(fr, repeat=self.n_inv)):
            yield GridAction(tap, caps, q)


@dataclass(frozen=True)
class OracleResult:
    action: ActionVector
    objective: float
    index: int


class _Evaluator:
    def __init__(self, net: Network, costs: CostConfig):
        self.net = net
        self.costs = costs
        self.inv_bus = np.array([net.index(inv.bus) for inv in net.inverters], dtype=int)
        self.pairs = [(i, j) for i, j, _ in series_admittance(net)]
        self._y: dict = {}

    def ybus(self, caps):
        Y = self._y.get(caps)
        if Y is None:
            Y = self._y[caps] = build_admittance(self.net, np.array(caps, dtype=int))
        return Y

    def objective(self, snap: Snapshot, action: ActionVector) -> float:
        p = -np.asarray(snap.load_p, dtype=float)
        q = -np.asarray(snap.load_q, dtype=float)
        p[self.inv_bus] += snap.pv
        q[self.inv_bus] += action.q_dg
        Y = self.ybus(tuple(action.caps))
        sol = pf.solve(Y, self.net.kw_to_pu(p), self.net.kw_to_pu(q), self.net.regulator.voltage(action.tap))
        if not sol.converged:
            return float("inf")
        loss = pf.compute_losses(Y, sol, self.pairs, self.net.base_mva).p_loss
        return self.costs.c_p * loss + self.costs.c_v * pf.count_violations(sol.vm, self.costs.v_lo, self.costs.v_hi)


def action_objective(net: Network, snap: Snapshot, action: ActionVector, costs: CostConfig = CostConfig()) -> float:
    """Single-step cost C_p * loss + C_v * violations; +inf if the flow diverges."""
    return _Evaluator(net, costs).objective(snap, action)


def exhaustive_vvo(net: Network, snap: Snapshot, grid: ActionGrid, costs: CostConfig = CostConfig()) -> OracleResult:
    ev = _Evaluator(net, costs)
    lim = q_limits(net, snap.pv)
    best = None
    for k, ga in enumerate(grid):
        a = ga.to_vector(lim)
        obj = ev.objective(snap, a)
        if best is None or obj < best.objective:
            best = OracleResult(a, obj, k)
    return best


@dataclass(frozen=True)
class ScenarioBox:
    """Interval box around a forecast snapshot.

    ``load_lo``/``load_hi`` bound active load per bus (kW); reactive load follows
    at the forecast power factor. ``pv_lo``/``pv_hi`` bound each PV unit.
    """
    forecast: Snapshot
    load_lo: np.ndarray
    load_hi: np.ndarray
    pv_lo: np.ndarray
    pv_hi: np.ndarray
    grouped: bool = True

    def __post_init__(self):
        if np.any(self.load_lo > self.load_hi) or np.any(self.pv_lo > self.pv_hi):
            raise ValueError("box lower bounds exceed upper bounds")

    @classmethod
    def from_intervals(cls, net: Network, forecast: Snapshot, lower, upper, grouped: bool = True) -> "ScenarioBox":
        """Build from channel bounds ordered as ``conformal.channel_names``."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        nl = len(net.load_buses)
        if lower.shape != (nl + len(net.inverters),) or upper.shape != lower.shape:
            raise ValueError("bounds do not match the network channels")
        lo = np.asarray(forecast.load_p, dtype=float).copy()
        hi = lo.copy()
        for c, b in enumerate(net.load_buses):
            lo[net.index(b)], hi[net.index(b)] = lower[c], upper[c]
        return cls(forecast, lo, hi, lower[nl:].copy(), upper[nl:].copy(), grouped)

    def _with_loads(self, lp):
        base = np.asarray(self.forecast.load_p, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(base > 0, lp / base, 0.0)
        return lp, np.asarray(self.forecast.load_q, dtype=float) * ratio

    @property
    def n_corners(self) -> int:
        if self.grouped:
            return 4
        varying = int(np.sum(self.load_lo != self.load_hi) + np.sum(self.pv_lo != self.pv_hi))
        return 2 ** varying

    def corners(self):
        if self.grouped:
            for lp, pv in itertools.product((self.load_lo, self.load_hi), (self.pv_lo, self.pv_hi)):
                yield Snapshot(*self._with_loads(lp), pv)
            return
        if self.n_corners > GUARD:
            raise GridTooLarge(f"{self.n_corners} corners exceed the limit {GUARD}")
        li = np.flatnonzero(self.load_lo != self.load_hi)
        pi = np.flatnonzero(self.pv_lo != self.pv_hi)
        for bits in itertools.product((0, 1), repeat=len(li) + len(pi)):
            lp = self.load_lo.copy()
            pv = self.pv_lo.copy()
            for b, k in zip(bits[:len(li)], li):
                if b:
                    lp[k] = self.load_hi[k]
            for b, k in zip(bits[len(li):], pi):
                if b:
                    pv[k] = self.pv_hi[k]
            yield Snapshot(*self._with_loads(lp), pv)


def worst_case(net: Network, box: ScenarioBox, action: ActionVector, costs: CostConfig = CostConfig()) -> float:
    ev = _Evaluator(net, costs)
    return max(ev.objective(s, action) for s in box.corners())


def robust_exhaustive(net: Network, box: ScenarioBox, grid: ActionGrid,
                      costs: CostConfig = CostConfig()) -> OracleResult:
    """Corner min-max: the grid action whose worst corner objective is smallest.

    Inverter headroom is taken at the box's upper PV bound so each candidate is
    feasible in every corner.
    """
    corners = list(box.corners())
    if grid.size * len(corners) > GUARD:
        raise GridTooLarge(f"{grid.size} actions x {len(corners)} corners exceed the limit {GUARD}")
    ev = _Evaluator(net, costs)
    lim = q_limits(net, box.pv_hi)
    best = None
    for k, ga in enumerate(grid):
        a = ga.to_vector(lim)
        obj = -np.inf
        for s in corners:
            obj = max(obj, ev.objective(s, a))
            if best is not None and obj >= best.objective:
                break  # cannot win any more
        if best is None or obj < best.objective:
            best = OracleResult(a, obj, k)
    return best


def random_policy(grid: ActionGrid, seed: int):
    """Endless reproducible stream of grid actions drawn uniformly."""
    rng = np.random.default_rng(seed)
    fr = grid.fractions
    while True:
        tap = grid.taps[int(rng.integers(len(grid.taps)))]
        caps = tuple(int(c) for c in rng.integers(0, 2, size=grid.n_caps))
        q = tuple(float(fr[i]) for i in rng.integers(0, len(fr), size=grid.n_inv))
        yield GridAction(tap, caps, q)
