import numpy as np
import pytest

from vvlab import baseline as bl
from vvlab.netmodel import q_limits
from vvlab.vvenv import CostConfig


def peak(net, scale=1.0, pv=0.0):
    return bl.Snapshot(net.load_p * scale, net.load_q * scale, np.full(len(net.inverters), pv))


@pytest.fixture(scope="module")
def grid5(bus5):
    return bl.ActionGrid.for_network(bus5, range(-4, 5), q_levels=5)


@pytest.fixture(scope="module")
def result5(bus5, grid5):
    return bl.exhaustive_vvo(bus5, peak(bus5), grid5)


def test_grid_enumeration(bus5, grid5):
    acts = list(grid5)
    assert len(acts) == grid5.size == 9 * 4 * 25
    assert acts[0] == bl.GridAction(-4, (0, 0), (-1.0, -1.0))
    assert acts[1].q_frac == (-1.0, -0.5)
    assert acts[-1] == bl.GridAction(4, (1, 1), (1.0, 1.0))
    with pytest.raises(ValueError):
        bl.ActionGrid.for_network(bus5, [17])


def test_grid_guard():
    with pytest.raises(bl.GridTooLarge):
        bl.ActionGrid(tuple(range(33)), 4, 3, q_levels=40)


def test_singleton_grid(bus5):
    grid = bl.ActionGrid((3,), 0, 0, 1)
    net = bus5.__class__(bus5.buses, bus5.branches, bus5.regulator, (), (), bus5.base_mva, "nodev")
    res = bl.exhaustive_vvo(net, bl.Snapshot(net.load_p, net.load_q, np.zeros(0)), grid)
    assert res.action.tap == 3 and res.index == 0


def test_zero_load_needs_no_control(bus5, grid5):
    res = bl.exhaustive_vvo(bus5, peak(bus5, 0.0), grid5)
    assert res.objective == pytest.approx(0.0, abs=1e-12)


def test_oracle_beats_every_grid_action(bus5, grid5, result5):
    snap = peak(bus5)
    lim = q_limits(bus5, snap.pv)
    objs = [bl.action_objective(bus5, snap, ga.to_vector(lim)) for ga in grid5]
    assert result5.objective == min(objs)
    assert objs.index(min(objs)) == result5.index  # first minimizer in scan order
    assert np.all(np.isfinite(objs))


def test_objective_reproducible(bus5, result5):
    again = bl.action_objective(bus5, peak(bus5), result5.action)
    assert abs(again - result5.objective) <= 1e-10


def test_oracle_fixes_uncontrolled_violations(bus5, result5):
    idle = bl.GridAction(0, (0, 0), (0.0, 0.0)).to_vector(q_limits(bus5, np.zeros(2)))
    assert bl.action_objective(bus5, peak(bus5), idle) > result5.objective
    violations_only = CostConfig(c_p=0.0, c_v=1.0)
    assert bl.action_objective(bus5, peak(bus5), idle, violations_only) >= 1
    assert bl.action_objective(bus5, peak(bus5), result5.action, violations_only) == 0


def test_enlarging_grid_never_worse(bus5, result5):
    small = bl.exhaustive_vvo(bus5, peak(bus5), bl.ActionGrid.for_network(bus5, range(-2, 3), q_levels=3))
    assert result5.objective <= small.objective


def test_divergent_actions_score_infinite(bus5):
    snap = peak(bus5, 25.0)
    grid = bl.ActionGrid.for_network(bus5, [-16], q_levels=1)
    res = bl.exhaustive_vvo(bus5, snap, grid)
    assert res.objective == np.inf


def box_around(net, snap, rel_load, rel_pv):
    ch_lo = [snap.load_p[net.index(b)] * (1 - rel_load) for b in net.load_buses] + list(snap.pv * (1 - rel_pv))
    ch_hi = [snap.load_p[net.index(b)] * (1 + rel_load) for b in net.load_buses] + list(snap.pv * (1 + rel_pv))
    return bl.ScenarioBox.from_intervals(net, snap, ch_lo, ch_hi)


def test_zero_width_box_matches_nominal(bus5, grid5, result5):
    snap = peak(bus5)
    box = box_around(bus5, snap, 0.0, 0.0)
    rob = bl.robust_exhaustive(bus5, box, grid5)
    assert rob.index == result5.index
    assert rob.objective == pytest.approx(result5.objective, abs=1e-12)


def test_robust_dominance(bus5):
    grid = bl.ActionGrid.for_network(bus5, range(-3, 4), q_levels=3)
    snap = peak(bus5, 0.9, pv=200.0)
    box = box_around(bus5, snap, 0.15, 0.5)
    rob = bl.robust_exhaustive(bus5, box, grid)
    lim = q_limits(bus5, box.pv_hi)
    nominal_opt = min((bl.action_objective(bus5, snap, g.to_vector(lim)), k) for k, g in enumerate(grid))
    nominal_action = list(grid)[nominal_opt[1]].to_vector(lim)
    assert rob.objective <= bl.worst_case(bus5, box, nominal_action) + 1e-12
    assert bl.action_objective(bus5, snap, rob.action) >= nominal_opt[0] - 1e-12
    assert rob.objective == pytest.approx(bl.worst_case(bus5, box, rob.action), abs=1e-10)


def test_single_action_robust(bus5):
    net = bus5.__class__(bus5.buses, bus5.branches, bus5.regulator, (), bus5.inverters, bus5.base_mva, "nocap")
    grid = bl.ActionGrid((1,), 0, 2, 1)
    snap = peak(net, 0.8, 100.0)
    box = box_around(net, snap, 0.1, 0.2)
    rob = bl.robust_exhaustive(net, box, grid)
    assert rob.action.tap == 1
    assert rob.objective == max(bl.action_objective(net, c, rob.action) for c in box.corners())


def test_corner_enumeration(bus5):
    snap = peak(bus5, 1.0, 100.0)
    box = box_around(bus5, snap, 0.1, 0.2)
    corners = list(box.corners())
    assert len(corners) == box.n_corners == 4
    assert np.allclose(corners[0].load_p, bus5.load_p * 0.9) and np.allclose(corners[0].pv, 80.0)
    assert np.allclose(corners[3].load_p, bus5.load_p * 1.1) and np.allclose(corners[3].pv, 120.0)
    # reactive load follows active load at constant power factor
    assert np.allclose(corners[0].load_q, bus5.load_q * 0.9)
    full = bl.ScenarioBox(box.forecast, box.load_lo, box.load_hi, box.pv_lo, box.pv_hi, grouped=False)
    assert full.n_corners == 2 ** 6 == len(list(full.corners()))
    with pytest.raises(ValueError):
        bl.ScenarioBox(snap, bus5.load_p, bus5.load_p - 1, snap.pv, snap.pv)


def test_random_policy(bus5):
    grid = bl.ActionGrid.for_network(bus5, q_levels=5)
    a = [next(s) for s in [bl.random_policy(grid, 3)] for _ in range(50)]
    b = [next(s) for s in [bl.random_policy(grid, 3)] for _ in range(50)]
    assert a == b
    stream = bl.random_policy(grid, 11)
    draws = [next(stream) for _ in range(10000)]
    caps = np.array([d.caps for d in draws])
    assert np.all(np.abs(caps.mean(axis=0) - 0.5) <= 0.05)
    assert all(-16 <= d.tap <= 16 and set(d.q_frac) <= set(grid.fractions.tolist()) for d in draws)
    taps = np.array([d.tap for d in draws])
    assert taps.min() == -16 and taps.max() == 16
