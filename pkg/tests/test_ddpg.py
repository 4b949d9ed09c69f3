import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import finite_difference, rel_err
from vvlab import ddpg, neural as nn, scenario as sc
from vvlab.netmodel import q_limits
from vvlab.vvenv import VVEnv

HEAD = ddpg.ActionHead(n_caps=2, n_inv=2)


def small_agent(seed=0, obs=6, head=HEAD, hidden=(5, 4)):
    cfg = ddpg.TrainConfig(hidden=hidden)
    rng = np.random.default_rng(seed)
    agent = ddpg.make_agent(obs, head, cfg, rng)
    # nonzero biases keep relu pre-activations off the kink at exactly 0
    for net in (agent.actor, agent.critic, agent.actor_target, agent.critic_target):
        for layer in net.layers:
            layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
    return agent


def random_batch(rng, n, obs=6, head=HEAD):
    s = rng.uniform(-1, 1, (n, obs))
    a = head.clip(rng.uniform(-1, 1, (n, head.width)) + np.r_[[0.5] * head.n_discrete, [0] * head.n_inv])
    return s, a, rng.normal(size=n), rng.uniform(-1, 1, (n, obs))


def test_decode_examples():
    lim = np.array([300.0, 400.0])
    a = HEAD.decode(np.array([1.0, 0.5, 0.51, 0.0, -1.0]), lim)
    assert a.tap == 16
    assert a.caps == (0, 1)
    assert a.q_dg.tolist() == [0.0, -400.0]
    assert HEAD.decode(np.array([0.0, 0, 0, 0, 0]), lim).tap == -16
    assert HEAD.decode(np.array([0.5, 0, 0, 0, 0]), lim).tap == 0


def test_encode_decode_round_trip():
    lim = np.array([300.0, 0.0])
    for tap in range(-16, 17):
        a = ddpg.ActionVector(tap, (1, 0), np.array([150.0, 0.0]))
        back = HEAD.decode(HEAD.encode(a, lim), lim)
        assert back.tap == tap and back.caps == (1, 0)
        assert back.q_dg.tolist() == [150.0, 0.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5), st.floats(0, 2), st.integers(0, 2 ** 31))
def test_emitted_actions_are_legal(u, noise, seed):
    agent = small_agent(obs=3)
    agent.actor.layers[-1].bias[:] = u
    s = type("S", (), {"features": np.zeros(3)})()
    lim = np.array([200.0, 50.0])
    raw, a = ddpg.act(agent, s, noise, np.random.default_rng(seed), lim)
    assert -16 <= a.tap <= 16
    assert set(a.caps) <= {0, 1}
    assert np.all(np.abs(a.q_dg) <= lim + 1e-9)
    assert np.all(raw[:3] >= 0) and np.all(raw[:3] <= 1) and np.all(np.abs(raw[3:]) <= 1)


def test_act_feature_mismatch():
    agent = small_agent(obs=3)
    s = type("S", (), {"features": np.zeros(4)})()
    with pytest.raises(ValueError):
        ddpg.act(agent, s, 0.0, None, np.ones(2))


def test_head_derivative_matches_fd():
    u = np.random.default_rng(1).normal(size=HEAD.width)
    fd = finite_difference(lambda x: HEAD.squash(x), u, h=1e-6)
    assert rel_err(np.diag(fd), HEAD.derivative(HEAD.squash(u))) < 1e-8
    assert np.allclose(fd - np.diag(np.diag(fd)), 0.0, atol=1e-9)


def test_replay_fifo():
    buf = ddpg.ReplayBuffer(5, 1, 1)
    for k in range(1, 9):
        buf.push([k], [k], k, [k])
        assert len(buf) == min(k, 5)
    s, a, r, s2 = buf.contents()
    assert r.tolist() == [4, 5, 6, 7, 8]
    assert s[:, 0].tolist() == [4, 5, 6, 7, 8]
    batch = buf.sample(100, np.random.default_rng(0))
    assert set(batch[2].tolist()) <= {4, 5, 6, 7, 8}
    with pytest.raises(ValueError):
        ddpg.ReplayBuffer(3, 1, 1).sample(1, np.random.default_rng(0))


def test_targets_myopic_limit():
    agent = small_agent()
    rng = np.random.default_rng(2)
    _, _, r, s2 = random_batch(rng, 7)
    y = ddpg.critic_targets(agent.critic_target, agent.actor_target, HEAD, r, s2, 0.0, 5.0)
    assert np.array_equal(y, 5.0 * r)


def test_critic_fixed_point_gives_zero_loss_and_gradient():
    agent = small_agent()
    last = agent.critic.layers[-1]
    last.weight[:] = 0.0
    last.bias[:] = 2.5
    rng = np.random.default_rng(0)
    s, a, _, _ = random_batch(rng, 1)
    s, a = np.repeat(s, 4, 0), np.repeat(a, 4, 0)
    loss, grads = ddpg.critic_loss(agent.critic, s, a, np.full(4, 2.5))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.params())


@pytest.mark.parametrize("seed", range(10))
def test_critic_loss_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    agent = small_agent(seed)
    s, a, r, s2 = random_batch(rng, 5)
    y = ddpg.critic_targets(agent.critic_target, agent.actor_target, HEAD, r, s2, 0.95, 5.0)
    _, grads = ddpg.critic_loss(agent.critic, s, a, y)
    for p, g in zip(agent.critic.params(), grads.params()):
        def f(x, p=p):
            old = p.copy()
            p[...] = x.reshape(p.shape)
            val = ddpg.critic_loss(agent.critic, s, a, y)[0]
            p[...] = old
            return np.array([val])
        fd = finite_difference(f, p.ravel().copy(), h=1e-6)[0]
        assert rel_err(g.ravel(), fd, floor=1e-6) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_actor_gradient_matches_fd(seed):
    rng = np.random.default_rng(100 + seed)
    agent = small_agent(seed)
    s = random_batch(rng, 4)[0]
    _, grads = ddpg.actor_objective(agent.actor, agent.critic, HEAD, s)
    for p, g in zip(agent.actor.params(), grads.params()):
        def f(x, p=p):
            old = p.copy()
            p[...] = x.reshape(p.shape)
            val = ddpg.actor_objective(agent.actor, agent.critic, HEAD, s)[0]
            p[...] = old
            return np.array([val])
        fd = finite_difference(f, p.ravel().copy(), h=1e-6)[0]
        assert rel_err(g.ravel(), fd, floor=1e-6) < 1e-4


def test_actor_unchanged_when_critic_ignores_action():
    agent = small_agent()
    agent.critic.layers[0].weight[:, 6:] = 0.0
    before = [p.copy() for p in agent.actor.params()]
    s = random_batch(np.random.default_rng(0), 8)[0]
    _, grads = ddpg.actor_objective(agent.actor, agent.critic, HEAD, s)
    assert all(np.all(g == 0) for g in grads.params())
    ddpg.actor_update(agent, (s, None, None, None))
    assert all(np.array_equal(b, p) for b, p in zip(before, agent.actor.params()))


def test_single_sample_batch_equals_sample_gradient():
    agent = small_agent(3)
    s = random_batch(np.random.default_rng(3), 1)[0]
    _, g1 = ddpg.actor_objective(agent.actor, agent.critic, HEAD, s)
    _, g2 = ddpg.actor_objective(agent.actor, agent.critic, HEAD, s[0])
    u = nn.forward(agent.actor, s[0])
    a = HEAD.squash(u)
    dq = nn.backward(agent.critic, np.r_[s[0], a], np.ones(1)).input[6:]
    g3 = nn.backward(agent.actor, s[0], dq * HEAD.derivative(a))
    for x, y, z in zip(g1.params(), g2.params(), g3.params()):
        assert np.allclose(x, y, rtol=1e-12, atol=0) and np.allclose(x, z, rtol=1e-12, atol=0)


def test_actor_update_ascends():
    agent = small_agent(4)
    s = random_batch(np.random.default_rng(4), 32)[0]
    j0 = ddpg.actor_objective(agent.actor, agent.critic, HEAD, s)[0]
    for _ in range(20):
        ddpg.actor_update(agent, (s, None, None, None))
    assert ddpg.actor_objective(agent.actor, agent.critic, HEAD, s)[0] > j0


def test_soft_update_examples():
    agent = small_agent()
    for p in agent.actor.params() + agent.critic.params():
        p[...] = 1.0
    for p in agent.actor_target.params() + agent.critic_target.params():
        p[...] = 0.0
    ddpg.soft_update(agent, 0.005)
    assert all(np.all(t == 0.005) for t in agent.actor_target.params())
    for _ in range(99):
        ddpg.soft_update(agent, 0.005)
    expected = 1.0 - 0.995 ** 100
    assert all(np.allclose(t, expected, rtol=1e-12) for t in agent.critic_target.params())
    ddpg.soft_update(agent, 1.0)
    assert all(np.array_equal(t, p) for t, p in zip(agent.actor_target.params(), agent.actor.params()))
    with pytest.raises(ValueError):
        ddpg.soft_update(agent, 0.0)


def test_soft_update_convex():
    rng = np.random.default_rng(5)
    agent = small_agent()
    for p in agent.actor.params():
        p[...] = rng.normal(size=p.shape)
    prev = [t.copy() for t in agent.actor_target.params()]
    ddpg.soft_update(agent, 0.3)
    for t, t0, p in zip(agent.actor_target.params(), prev, agent.actor.params()):
        assert np.all(t >= np.minimum(t0, p)) and np.all(t <= np.maximum(t0, p))


def test_train_config_validation():
    for bad in ({"gamma": 1.0}, {"tau": 0.0}, {"batch_size": 0}, {"buffer_size": 10, "batch_size": 64},
                {"episodes": -1}, {"noise": -0.1}):
        with pytest.raises(ValueError):
            ddpg.TrainConfig(**bad)
    with pytest.raises(ValueError):
        ddpg.TrainConfig.from_dict({"gama": 0.9})
    cfg = ddpg.TrainConfig.from_dict({"hidden": [8, 8]})
    assert cfg.hidden == (8, 8) and ddpg.TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def small_env(bus5):
    truth = sc.generate(bus5, 3, seed=0)
    return VVEnv(bus5, truth, sc.make_forecasts(truth, 0.05, seed=1))


FAST = dict(episodes=3, pretrain_steps=100, batch_size=16, buffer_size=200, hidden=(8, 8))


def test_zero_episodes(small_env):
    agent, log = ddpg.train(small_env, ddpg.TrainConfig(episodes=0, seed=3))
    assert log.rows == []
    fresh = ddpg.make_agent(small_env.obs_dim, ddpg.head_for(small_env), ddpg.TrainConfig(seed=3),
                            np.random.default_rng(3))
    assert nn.serialize(agent.actor) == nn.serialize(fresh.actor)


def test_training_deterministic(small_env, tmp_path):
    outs = []
    for k in range(2):
        agent, log = ddpg.train(small_env, ddpg.TrainConfig(seed=7, **FAST))
        ddpg.save(agent, tmp_path / str(k), ddpg.TrainConfig(seed=7, **FAST))
        outs.append((log.to_csv(), *((tmp_path / str(k) / f).read_bytes()
                                     for f in ("actor.vvnn", "critic.vvnn", "model.json"))))
    assert outs[0] == outs[1]
    assert outs[0][0].splitlines()[0] == "episode,mean_reward,critic_loss,actor_objective,buffer_fill"
    assert len(outs[0][0].splitlines()) == 4


def test_targets_change_only_in_soft_update(small_env, monkeypatch):
    calls = []
    real = ddpg.soft_update

    def spy(agent, tau):
        calls.append([p.copy() for p in agent.actor_target.params()])
        real(agent, tau)
    monkeypatch.setattr(ddpg, "soft_update", spy)
    orig_critic_update = ddpg.critic_update

    def checked_update(agent, *a, **k):
        before = [p.copy() for p in agent.actor_target.params() + agent.critic_target.params()]
        out = orig_critic_update(agent, *a, **k)
        assert all(np.array_equal(b, p) for b, p in
                   zip(before, agent.actor_target.params() + agent.critic_target.params()))
        return out
    monkeypatch.setattr(ddpg, "critic_update", checked_update)
    ddpg.train(small_env, ddpg.TrainConfig(seed=1, **FAST))
    assert len(calls) == 3 * 48


def test_evaluate_repeatable_and_save_load(small_env, tmp_path):
    cfg = ddpg.TrainConfig(seed=2, **FAST)
    agent, _ = ddpg.train(small_env, cfg)
    r1 = ddpg.evaluate(agent, small_env)
    r2 = ddpg.evaluate(agent, small_env)
    assert [x.reward for x in r1.metrics.records] == [x.reward for x in r2.metrics.records]
    assert r1.latency_ms > 0
    ddpg.save(agent, tmp_path, cfg, ddpg.layout_hash(small_env))
    back, meta = ddpg.load(tmp_path)
    assert meta["feature_layout"] == ddpg.layout_hash(small_env)
    r3 = ddpg.evaluate(back, small_env)
    assert r3.summary["vvr"] == r1.summary["vvr"]
    assert [x.reward for x in r3.metrics.records] == [x.reward for x in r1.metrics.records]


def test_load_rejects_mismatched_files(small_env, tmp_path):
    cfg = ddpg.TrainConfig(seed=2, **FAST)
    agent, _ = ddpg.train(small_env, ddpg.TrainConfig(seed=2, **{**FAST, "episodes": 0}))
    ddpg.save(agent, tmp_path, cfg)
    (tmp_path / "critic.vvnn").write_bytes((tmp_path / "actor.vvnn").read_bytes())
    with pytest.raises(nn.ModelFormatError):
        ddpg.load(tmp_path)


def test_greedy_decisions_respect_forecast_limits(small_env):
    agent, _ = ddpg.train(small_env, ddpg.TrainConfig(seed=0, **{**FAST, "episodes": 0}))
    s = small_env.reset(0)
    for _ in range(30):
        lim = q_limits(small_env.net, small_env.forecast_pv())
        _, a = ddpg.act(agent, s, 0.0, None, lim)
        assert np.all(np.abs(a.q_dg) <= lim)
        s = small_env.step(a).state
