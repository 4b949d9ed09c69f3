import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vvlab.netmodel import (
    Branch, Bus, CapacitorBank, Network, NetworkError, Regulator, SmartInverter,
    build_admittance, inverter_q_limit, load_network, network_to_dict,
)


def _write(tmp_path, doc):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(doc))
    return path


def test_bundled_bus5_shape(bus5):
    assert bus5.n_bus == 5
    assert len(bus5.branches) == 4
    assert bus5.buses[0].id == 0 and bus5.buses[0].kind == "slack"
    assert [c.rated_q for c in bus5.capacitors] == [150.0, 100.0]


def test_bundled_bus13_devices(bus13):
    assert bus13.n_bus == 13
    assert sorted(c.rated_q for c in bus13.capacitors) == [100.0, 150.0]
    assert len(bus13.inverters) == 3
    assert len({inv.bus for inv in bus13.inverters}) == 3
    assert all(inv.rated_p == 500.0 and inv.rated_s == 550.0 for inv in bus13.inverters)


def test_round_trip_through_file(tmp_path, bus5):
    again = load_network(_write(tmp_path, network_to_dict(bus5)))
    assert again == bus5


def test_two_slack_buses_rejected(tmp_path, bus5):
    doc = network_to_dict(bus5)
    doc["buses"][1]["kind"] = "slack"
    with pytest.raises(NetworkError, match="multiple slack buses"):
        load_network(_write(tmp_path, doc))


def test_disconnected_bus_rejected(tmp_path, bus5):
    doc = network_to_dict(bus5)
    doc["branches"] = [b for b in doc["branches"] if b["to"] != 4]
    with pytest.raises(NetworkError, match="disconnected"):
        load_network(_write(tmp_path, doc))


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["buses"].append(dict(d["buses"][2])), "duplicate bus id"),
    (lambda d: d["buses"][0].update(kind="pq"), "missing slack"),
    (lambda d: d.update(colour="red"), "unknown key"),
    (lambda d: d["branches"][0].update(r_ohm=-1.0), "negative resistance"),
    (lambda d: d["capacitors"][0].update(bus=99), "unknown bus"),
    (lambda d: d["inverters"][0].update(rated_kw=600.0), "rated_kw"),
    (lambda d: d["buses"][1].update(base_kv=0.0), "base_kv"),
])
def test_validation_errors(tmp_path, bus5, mutate, message):
    doc = network_to_dict(bus5)
    mutate(doc)
    with pytest.raises(NetworkError, match=message):
        load_network(_write(tmp_path, doc))


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "base_mva": 1.0,\n "buses": [,]\n}')
    with pytest.raises(NetworkError, match="line 3"):
        load_network(path)


def _two_bus(x_pu=0.1, shunt_caps=()):
    # base_kv = 1 kV, base_mva = 1 -> z_base = 1 ohm, so ohms equal per-unit
    return Network(
        buses=(Bus(0, "slack", 1.0), Bus(1, "pq", 1.0)),
        branches=(Branch(0, 1, 0.0, x_pu),),
        capacitors=tuple(CapacitorBank(1, q) for q in shunt_caps),
        base_mva=1.0,
    )


def test_admittance_empty_network_is_zero():
    net = Network(buses=(Bus(0, "slack", 1.0),), branches=())
    assert np.array_equal(build_admittance(net), np.zeros((1, 1), dtype=complex))


def test_admittance_single_reactive_branch():
    Y = build_admittance(_two_bus())
    assert Y[0, 1] == pytest.approx(10j)
    assert Y[1, 0] == pytest.approx(10j)
    assert Y[0, 0] == pytest.approx(-10j)
    assert Y[1, 1] == pytest.approx(-10j)


def test_capacitor_adds_shunt_susceptance():
    net = _two_bus(shunt_caps=(100.0,))
    off = build_admittance(net, [0])
    on = build_admittance(net, [1])
    diff = on - off
    assert diff[1, 1] == pytest.approx(0.1j)
    diff[1, 1] = 0
    assert np.all(diff == 0)


def test_cap_status_length_checked(bus5):
    with pytest.raises(ValueError):
        build_admittance(bus5, [1])


def test_line_charging_split_between_ends():
    net = Network(buses=(Bus(0, "slack", 1.0), Bus(1, "pq", 1.0)),
                  branches=(Branch(0, 1, 0.01, 0.1, shunt_susceptance=0.02),))
    Y = build_admittance(net)
    assert (Y[0, 0] + Y[0, 1]) == pytest.approx(0.01j)
    assert (Y[1, 1] + Y[1, 0]) == pytest.approx(0.01j)


def test_admittance_matches_per_branch_sum(bus13):
    status = [1, 0]
    Y = build_admittance(bus13, status)
    assert np.array_equal(Y, Y.T)
    ref = np.zeros_like(Y)
    idx = {b.id: k for k, b in enumerate(bus13.buses)}
    for br in bus13.branches:
        zb = bus13.buses[idx[br.from_bus]].base_kv ** 2 / bus13.base_mva
        y = 1 / complex(br.resistance / zb, br.reactance / zb)
        i, j = idx[br.from_bus], idx[br.to_bus]
        ref[[i, j], [i, j]] += y
        ref[i, j] -= y
        ref[j, i] -= y
    cap = bus13.capacitors[0]
    ref[idx[cap.bus], idx[cap.bus]] += 1j * cap.rated_q / 1000 / bus13.base_mva
    assert np.allclose(Y, ref, rtol=1e-14, atol=1e-12)


def test_regulator_tap_zero_is_nominal():
    assert Regulator().voltage(0) == 1.0


def test_regulator_endpoints():
    reg = Regulator()
    assert reg.n_taps == 33
    assert reg.voltage(-16) == pytest.approx(0.9, abs=1e-15)
    assert reg.voltage(16) == pytest.approx(1.1, abs=1e-15)
    with pytest.raises(ValueError):
        reg.voltage(17)


@given(st.integers(-16, 16))
def test_regulator_ratio_in_band(tap):
    assert 0.9 - 1e-15 <= Regulator().voltage(tap) <= 1.1 + 1e-15


def test_q_limit_values():
    assert inverter_q_limit(SmartInverter(0, 1.0, 1.1), 1.1) == 0.0
    assert inverter_q_limit(SmartInverter(0, 1.0, 1.1), 1.0) == pytest.approx(math.sqrt(0.21), abs=1e-12)
    assert inverter_q_limit(SmartInverter(0, 1.0, 1.1), 1.0) == pytest.approx(0.4583, abs=1e-4)
    assert inverter_q_limit(SmartInverter(0, 500.0, 550.0), 0.0) == 550.0
    with pytest.raises(ValueError):
        inverter_q_limit(SmartInverter(0, 500.0, 550.0), 551.0)


@given(st.floats(0, 550), st.floats(0, 550))
def test_q_limit_monotone(a, b):
    inv = SmartInverter(0, 500.0, 550.0)
    lo, hi = sorted((a, b))
    assert inverter_q_limit(inv, lo) >= inverter_q_limit(inv, hi)
