"""Radial feeder model: buses, branches, voltage-regulation devices and the Y-bus.

All quantities in the JSON file are physical (kW, kVar, ohms, siemens); the
per-unit conversion happens in :func:`build_admittance` using ``base_mva`` and
the sending-end bus ``base_kv``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

SLACK = "slack"
PQ = "pq"

BUNDLED = ("bus5", "bus13")


class NetworkError(ValueError):
    """Raised when a network file cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_kv: float
    load_p: float = 0.0  # kW
    load_q: float = 0.0  # kVar


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    resistance: float  # ohm
    reactance: float  # ohm
    shunt_susceptance: float = 0.0  # siemens, total line charging


@dataclass(frozen=True)
class Regulator:
    tap_min: int = -16
    tap_max: int = 16
    step_pu: float = 0.2 / 32

    def voltage(self, tap: int) -> float:
        """Substation reference voltage for a tap position."""
        if not self.tap_min <= tap <= self.tap_max:
            raise ValueError(f"tap {tap} outside [{self.tap_min}, {self.tap_max}]")
        return 1.0 + tap * self.step_pu

    @property
    def n_taps(self) -> int:
        return self.tap_max - self.tap_min + 1


@dataclass(frozen=True)
class CapacitorBank:
    bus: int
    rated_q: float  # kVar


@dataclass(frozen=True)
class SmartInverter:
    bus: int
    rated_p: float  # kW
    rated_s: float  # kVA


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    regulator: Regulator = field(default_factory=Regulator)
    capacitors: tuple[CapacitorBank, ...] = ()
    inverters: tuple[SmartInverter, ...] = ()
    base_mva: float = 1.0
    name: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index(self, bus_id: int) -> int:
        return self._index[bus_id]

    @cached_property
    def _index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def load_p(self) -> np.ndarray:
        return np.array([b.load_p for b in self.buses])

    @property
    def load_q(self) -> np.ndarray:
        return np.array([b.load_q for b in self.buses])

    @property
    def load_buses(self) -> list[int]:
        """Bus ids carrying a nonzero nominal load, in bus order."""
        return [b.id for b in self.buses if b.load_p != 0.0 or b.load_q != 0.0]

    def kw_to_pu(self, kw):
        return np.asarray(kw, dtype=float) / (1000.0 * self.base_mva)

    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise NetworkError(f"duplicate bus id {dup[0]}")
        slacks = [b for b in self.buses if b.kind == SLACK]
        if not slacks:
            raise NetworkError("missing slack bus")
        if len(slacks) > 1:
            raise NetworkError("multiple slack buses")
        if slacks[0].id != 0:
            raise NetworkError("slack bus must have id 0")
        for b in self.buses:
            if b.kind not in (SLACK, PQ):
                raise NetworkError(f"bus {b.id}: unknown kind {b.kind!r}")
            if not b.base_kv > 0:
                raise NetworkError(f"bus {b.id}: base_kv must be positive")
            if not (math.isfinite(b.load_p) and math.isfinite(b.load_q)):
                raise NetworkError(f"bus {b.id}: load must be finite")
        known = set(ids)
        for br in self.branches:
            if br.from_bus == br.to_bus:
                raise NetworkError(f"branch {br.from_bus}-{br.to_bus}: self loop")
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise NetworkError(f"branch references unknown bus {end}")
            if br.resistance < 0:
                raise NetworkError(f"branch {br.from_bus}-{br.to_bus}: negative resistance")
            if br.resistance == 0 and br.reactance == 0:
                raise NetworkError(f"branch {br.from_bus}-{br.to_bus}: zero impedance")
        unreachable = known - _reachable(0, self.branches)
        if unreachable:
            raise NetworkError(f"bus {min(unreachable)} is disconnected from the slack bus")
        reg = self.regulator
        if reg.tap_min > 0 or reg.tap_max < 0 or reg.step_pu <= 0:
            raise NetworkError("regulator tap range must contain 0 and step must be positive")
        for cap in self.capacitors:
            if cap.bus not in known:
                raise NetworkError(f"capacitor references unknown bus {cap.bus}")
            if not cap.rated_q > 0:
                raise NetworkError(f"capacitor at bus {cap.bus}: rated_kvar must be positive")
        for inv in self.inverters:
            if inv.bus not in known:
                raise NetworkError(f"inverter references unknown bus {inv.bus}")
            if not 0 <= inv.rated_p <= inv.rated_s:
                raise NetworkError(f"inverter at bus {inv.bus}: need 0 <= rated_kw <= rated_kva")
        if not self.base_mva > 0:
            raise NetworkError("base_mva must be positive")


def _reachable(root, branches):
    adj: dict[int, list[int]] = {}
    for br in branches:
        adj.setdefault(br.from_bus, []).append(br.to_bus)
        adj.setdefault(br.to_bus, []).append(br.from_bus)
    seen = {root}
    stack = [root]
    while stack:
        for nxt in adj.get(stack.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


_TOP_KEYS = {"base_mva", "buses", "branches", "regulator", "capacitors", "inverters", "name"}
_BUS_KEYS = {"id", "kind", "base_kv", "load_p_kw", "load_q_kvar"}
_BRANCH_KEYS = {"from", "to", "r_ohm", "x_ohm", "b_s"}
_REG_KEYS = {"tap_min", "tap_max", "step_pu"}
_CAP_KEYS = {"bus", "rated_kvar"}
_INV_KEYS = {"bus", "rated_kw", "rated_kva"}


def _record(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise NetworkError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise NetworkError(f"{where}: unknown key {sorted(unknown)[0]!r}")
    missing = set(required) - set(obj)
    if missing:
        raise NetworkError(f"{where}: missing key {sorted(missing)[0]!r}")
    return obj


def _num(obj, key, where, default=None, kind=float):
    if key not in obj:
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise NetworkError(f"{where}.{key}: expected a number, got {val!r}")
    if kind is int:
        if float(val) != int(val):
            raise NetworkError(f"{where}.{key}: expected an integer, got {val!r}")
        return int(val)
    return float(val)


def network_from_dict(doc: dict) -> Network:
    """Build and validate a :class:`Network` from a parsed network document."""
    _record(doc, _TOP_KEYS, ("base_mva", "buses", "branches"), "network")
    buses = []
    for k, b in enumerate(doc["buses"]):
        where = f"buses[{k}]"
        _record(b, _BUS_KEYS, ("id", "kind", "base_kv"), where)
        buses.append(Bus(
            id=_num(b, "id", where, kind=int),
            kind=str(b["kind"]),
            base_kv=_num(b, "base_kv", where),
            load_p=_num(b, "load_p_kw", where, 0.0),
            load_q=_num(b, "load_q_kvar", where, 0.0),
        ))
    branches = []
    for k, br in enumerate(doc["branches"]):
        where = f"branches[{k}]"
        _record(br, _BRANCH_KEYS, ("from", "to", "r_ohm", "x_ohm"), where)
        branches.append(Branch(
            from_bus=_num(br, "from", where, kind=int),
            to_bus=_num(br, "to", where, kind=int),
            resistance=_num(br, "r_ohm", where),
            reactance=_num(br, "x_ohm", where),
            shunt_susceptance=_num(br, "b_s", where, 0.0),
        ))
    reg_doc = _record(doc.get("regulator", {}), _REG_KEYS, (), "regulator")
    regulator = Regulator(
        tap_min=_num(reg_doc, "tap_min", "regulator", -16, kind=int),
        tap_max=_num(reg_doc, "tap_max", "regulator", 16, kind=int),
        step_pu=_num(reg_doc, "step_pu", "regulator", 0.2 / 32),
    )
    caps = []
    for k, c in enumerate(doc.get("capacitors", [])):
        where = f"capacitors[{k}]"
        _record(c, _CAP_KEYS, _CAP_KEYS, where)
        caps.append(CapacitorBank(bus=_num(c, "bus", where, kind=int), rated_q=_num(c, "rated_kvar", where)))
    invs = []
    for k, inv in enumerate(doc.get("inverters", [])):
        where = f"inverters[{k}]"
        _record(inv, _INV_KEYS, _INV_KEYS, where)
        invs.append(SmartInverter(
            bus=_num(inv, "bus", where, kind=int),
            rated_p=_num(inv, "rated_kw", where),
            rated_s=_num(inv, "rated_kva", where),
        ))
    net = Network(
        buses=tuple(buses),
        branches=tuple(branches),
        regulator=regulator,
        capacitors=tuple(caps),
        inverters=tuple(invs),
        base_mva=_num(doc, "base_mva", "network"),
        name=str(doc.get("name", "")),
    )
    net.validate()
    return net


def network_to_dict(net: Network) -> dict:
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [
            {"id": b.id, "kind": b.kind, "base_kv": b.base_kv, "load_p_kw": b.load_p, "load_q_kvar": b.load_q}
            for b in net.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r_ohm": br.resistance, "x_ohm": br.reactance,
             "b_s": br.shunt_susceptance}
            for br in net.branches
        ],
        "regulator": {"tap_min": net.regulator.tap_min, "tap_max": net.regulator.tap_max,
                      "step_pu": net.regulator.step_pu},
        "capacitors": [{"bus": c.bus, "rated_kvar": c.rated_q} for c in net.capacitors],
        "inverters": [{"bus": i.bus, "rated_kw": i.rated_p, "rated_kva": i.rated_s} for i in net.inverters],
    }


def load_network(path) -> Network:
    """Read a network JSON file.

    ``path`` may also be the name of a bundled feeder (``bus5``, ``bus13``) or
    a path whose file name is ``bus5.json``/``bus13.json`` when no such file
    exists on disk.
    """
    p = resolve_network_path(path)
    text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return network_from_dict(doc)


def resolve_network_path(path):
    p = Path(path)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    if stem in BUNDLED:
        return resources.files("vvlab") / "fixtures" / f"{stem}.json"
    raise NetworkError(f"network file not found: {path}")


def build_admittance(net: Network, cap_status=None) -> np.ndarray:
    """Complex per-unit Y-bus with active capacitors folded in as shunts.

    Branches use the pi model; ``shunt_susceptance`` is split evenly between
    the two ends.
    """
    n = net.n_bus
    if cap_status is None:
        cap_status = np.zeros(len(net.capacitors), dtype=int)
    cap_status = np.asarray(cap_status)
    if cap_status.shape != (len(net.capacitors),):
        raise ValueError(f"cap_status must have length {len(net.capacitors)}")
    idx = net._index
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        z_base = net.buses[i].base_kv ** 2 / net.base_mva
        y = 1.0 / complex(br.resistance / z_base, br.reactance / z_base)
        half_b = 0.5j * br.shunt_susceptance * z_base
        Y[i, j] -= y
        Y[j, i] -= y
        Y[i, i] += y + half_b
        Y[j, j] += y + half_b
    for cap, on in zip(net.capacitors, cap_status):
        if on:
            Y[idx[cap.bus], idx[cap.bus]] += 1j * cap.rated_q / (1000.0 * net.base_mva)
    return Y


def series_admittance(net: Network) -> list[tuple[int, int, complex]]:
    """Per-branch (i, j, y_series) in per-unit, with bus indices."""
    idx = net._index
    out = []
    for br in net.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        z_base = net.buses[i].base_kv ** 2 / net.base_mva
        out.append((i, j, 1.0 / complex(br.resistance / z_base, br.reactance / z_base)))
    return out


def inverter_q_limit(inv: SmartInverter, active_p: float) -> float:
    """Reactive headroom sqrt(S^2 - P^2) of an inverter, in the units of its rating."""
    if active_p > inv.rated_s or active_p < 0:
        raise ValueError(f"active_p={active_p} outside [0, rated_s={inv.rated_s}]")
    return math.sqrt(inv.rated_s ** 2 - active_p ** 2)


def q_limits(net: Network, pv_kw) -> np.ndarray:
    """Vectorized :func:`inverter_q_limit` for every inverter; PV is clipped into range."""
    rated_s = np.array([inv.rated_s for inv in net.inverters])
    p = np.clip(np.asarray(pv_kw, dtype=float), 0.0, rated_s)
    return np.sqrt(np.maximum(rated_s ** 2 - p ** 2, 0.0))
