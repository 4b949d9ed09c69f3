"""DDPG agent with a hybrid sigmoid/tanh action head.

The actor's last dense layer is linear; :class:`ActionHead` squashes its output
into the raw action ``a``: sigmoid for the regulator and each capacitor, tanh
for each inverter. The critic sees ``a`` (not the decoded discrete action),
which keeps the policy gradient defined.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import neural as nn
from .netmodel import q_limits
from .scenario import STEPS_PER_DAY
from .vvenv import ActionVector, AdversarialState, EpisodeMetrics, VVEnv

HIDDEN = (30, 40, 80)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 200
    gamma: float = 0.95
    tau: float = 0.005
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    noise: float = 0.07
    pretrain_steps: int = 500
    reward_scale: float = 5.0
    batch_size: int = 64
    buffer_size: int = 3000
    hidden: tuple[int, ...] = HIDDEN
    target_networks: bool = True  # False: bootstrap from the online nets
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.episodes < 0 or self.pretrain_steps < 0:
            raise ValueError("episodes and pretrain_steps must be non-negative")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_size")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown training keys: {sorted(extra)}")
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(int(h) for h in doc["hidden"])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass(frozen=True)
class ActionHead:
    n_caps: int
    n_inv: int
    tap_min: int = -16
    tap_max: int = 16

    @property
    def n_discrete(self) -> int:
        return 1 + self.n_caps

    @property
    def width(self) -> int:
        return 1 + self.n_caps + self.n_inv

    def squash(self, u):
        u = np.asarray(u, dtype=float)
        a = np.empty_like(u)
        d = self.n_discrete
        a[..., :d] = 0.5 * (1.0 + np.tanh(0.5 * u[..., :d]))
        a[..., d:] = np.tanh(u[..., d:])
        return a

    def derivative(self, a):
        """d squash / d u expressed through the squashed values."""
        a = np.asarray(a, dtype=float)
        g = np.empty_like(a)
        d = self.n_discrete
        g[..., :d] = a[..., :d] * (1.0 - a[..., :d])
        g[..., d:] = 1.0 - a[..., d:] ** 2
        return g

    def clip(self, a):
        a = np.array(a, dtype=float)
        d = self.n_discrete
        a[..., :d] = np.clip(a[..., :d], 0.0, 1.0)
        a[..., d:] = np.clip(a[..., d:], -1.0, 1.0)
        return a

    def decode(self, a, q_limit) -> ActionVector:
        a = np.asarray(a, dtype=float)
        if a.shape != (self.width,):
            raise ValueError(f"raw action must have {self.width} entries")
        # round-half-even on exact .5 is fine; any tie lands on a legal tap
        tap = int(np.rint(self.tap_min + a[0] * (self.tap_max - self.tap_min)))
        tap = min(max(tap, self.tap_min), self.tap_max)
        caps = tuple(int(x > 0.5) for x in a[1:self.n_discrete])
        q = a[self.n_discrete:] * np.asarray(q_limit, dtype=float)
        return ActionVector(tap, caps, q)

    def encode(self, action: ActionVector, q_limit) -> np.ndarray:
        """Raw head values that decode to ``action`` (used for the heuristic warm-up)."""
        a = np.empty(self.width)
        a[0] = (action.tap - self.tap_min) / (self.tap_max - self.tap_min)
        a[1:self.n_discrete] = action.caps
        lim = np.asarray(q_limit, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            a[self.n_discrete:] = np.where(lim > 0, np.asarray(action.q_dg, dtype=float) / lim, 0.0)
        return self.clip(a)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of ``(s, a, r, s')`` transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, s, a, r, s2) -> None:
        k = self._next
        self.s[k], self.a[k], self.r[k], self.s2[k] = s, a, r, s2
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def contents(self):
        """All stored transitions, oldest first."""
        idx = self._order()
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]

    def sample(self, n: int, rng):
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=n)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]


@dataclass
class Agent:
    head: ActionHead
    obs_dim: int
    actor: nn.DenseNet
    critic: nn.DenseNet
    actor_target: nn.DenseNet
    critic_target: nn.DenseNet
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState


def make_agent(obs_dim: int, head: ActionHead, config: TrainConfig, rng) -> Agent:
    hid = tuple(config.hidden)
    acts = ["relu"] * len(hid) + ["identity"]
    actor = nn.init_net((obs_dim,) + hid + (head.width,), acts, rng)
    critic = nn.init_net((obs_dim + head.width,) + hid + (1,), acts, rng)
    return Agent(head, obs_dim, actor, critic, actor.copy(), critic.copy(),
                 nn.adam_init(actor, config.lr_actor), nn.adam_init(critic, config.lr_critic))


def policy(agent: Agent, features) -> np.ndarray:
    """Deterministic raw action(s) for state features."""
    return agent.head.squash(nn.forward(agent.actor, features))


def act(agent: Agent, s_adv: AdversarialState, noise: float, rng, q_limit):
    """Returns ``(raw_action, ActionVector)``; noise is added before clipping and decoding."""
    x = s_adv.features
    if x.shape != (agent.obs_dim,):
        raise ValueError(f"state has {x.size} features, actor expects {agent.obs_dim}")
    a = policy(agent, x)
    if noise > 0:
        a = agent.head.clip(a + rng.normal(0.0, noise, size=a.shape))
    return a, agent.head.decode(a, q_limit)


# -- pure loss / gradient functions ------------------------------------------

def critic_targets(critic_t: nn.DenseNet, actor_t: nn.DenseNet, head: ActionHead, r, s2,
                   gamma: float, reward_scale: float) -> np.ndarray:
    a2 = head.squash(nn.forward(actor_t, s2))
    q2 = nn.forward(critic_t, np.hstack([s2, a2]))[:, 0]
    return reward_scale * np.asarray(r, dtype=float) + gamma * q2


def critic_loss(critic: nn.DenseNet, s, a, y):
    """Mean squared TD error and its gradient with respect to the critic."""
    x = np.hstack([s, a])
    q = nn.forward(critic, x)[:, 0]
    err = q - y
    loss = float(np.mean(err * err))
    grads = nn.backward(critic, x, (2.0 / len(y)) * err[:, None])
    return loss, grads


def actor_objective(actor: nn.DenseNet, critic: nn.DenseNet, head: ActionHead, s):
    """J = mean Q(s, mu(s)) and dJ/dtheta through the critic's action input."""
    s = np.atleast_2d(s)
    n = len(s)
    u = nn.forward(actor, s)
    a = head.squash(u)
    x = np.hstack([s, a])
    J = float(np.mean(nn.forward(critic, x)))
    dq_dx = nn.backward(critic, x, np.full((n, 1), 1.0 / n)).input
    upstream = dq_dx[:, s.shape[1]:] * head.derivative(a)
    return J, nn.backward(actor, s, upstream)


def _negate(g: nn.GradientSet) -> nn.GradientSet:
    return nn.GradientSet([-w for w in g.weights], [-b for b in g.biases], -g.input)


def critic_update(agent: Agent, batch, gamma: float, reward_scale: float = 1.0, use_targets: bool = True) -> float:
    s, a, r, s2 = batch
    if len(r) == 0:
        raise ValueError("empty batch")
    if use_targets:
        y = critic_targets(agent.critic_target, agent.actor_target, agent.head, r, s2, gamma, reward_scale)
    else:
        y = critic_targets(agent.critic, agent.actor, agent.head, r, s2, gamma, reward_scale)
    loss, grads = critic_loss(agent.critic, s, a, y)
    nn.adam_step(agent.critic, grads, agent.critic_opt)
    return loss


def actor_update(agent: Agent, batch) -> float:
    s = batch[0]
    if len(s) == 0:
        raise ValueError("empty batch")
    J, grads = actor_objective(agent.actor, agent.critic, agent.head, s)
    nn.adam_step(agent.actor, _negate(grads), agent.actor_opt)  # ascent on J
    return J


def soft_update(agent: Agent, tau: float) -> None:
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    for online, target in ((agent.actor, agent.actor_target), (agent.critic, agent.critic_target)):
        for p, t in zip(online.params(), target.params()):
            if tau == 1:
                t[...] = p
            else:
                t *= 1.0 - tau
                t += tau * p


# -- training ------------------------------------------------------------------

LOG_COLUMNS = ("episode", "mean_reward", "critic_loss", "actor_objective", "buffer_fill")


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, episode, mean_reward, critic_loss, actor_objective, buffer_fill):
        self.rows.append((episode, mean_reward, critic_loss, actor_objective, buffer_fill))

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for ep, rew, cl, aj, fill in self.rows:
            w.writerow([ep, repr(float(rew)), repr(float(cl)), repr(float(aj)), fill])
        return out.getvalue()

    def mean_rewards(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


def head_for(env: VVEnv) -> ActionHead:
    reg = env.net.regulator
    return ActionHead(env.n_caps, env.n_inv, reg.tap_min, reg.tap_max)


def _heuristic_fill(agent, env, buffer, config, rng):
    """Warm the buffer with a do-nothing operating policy (tap 0, caps off, q 0)."""
    pushed = 0
    idle = ActionVector(0, (0,) * env.n_caps, np.zeros(env.n_inv))
    while pushed < config.pretrain_steps:
        s = env.reset(int(rng.integers(env.n_days)))
        for _ in range(STEPS_PER_DAY):
            lim = env.q_limits_forecast()
            a = agent.head.encode(idle, lim)
            if config.noise > 0:
                a = agent.head.clip(a + rng.normal(0.0, config.noise, size=a.shape))
            out = env.step(agent.head.decode(a, lim))
            buffer.push(s.features, a, out.reward, out.state.features)
            s = out.state
            pushed += 1
            if pushed >= config.pretrain_steps:
                break


def train(env: VVEnv, config: TrainConfig = TrainConfig(), progress=None):
    """Run the full training loop on ``env`` (its days are the training days).

    Returns ``(agent, TrainLog)``. Deterministic for a given ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    head = head_for(env)
    agent = make_agent(env.obs_dim, head, config, rng)
    log = TrainLog()
    if config.episodes == 0:
        return agent, log
    buffer = ReplayBuffer(config.buffer_size, env.obs_dim, head.width)
    _heuristic_fill(agent, env, buffer, config, rng)
    for ep in range(config.episodes):
        s = env.reset(int(rng.integers(env.n_days)))
        rewards, closs, aobj = [], [], []
        for _ in range(STEPS_PER_DAY):
            a, action = act(agent, s, config.noise, rng, env.q_limits_forecast())
            out = env.step(action)
            buffer.push(s.features, a, out.reward, out.state.features)
            rewards.append(out.reward)
            s = out.state
            if len(buffer) >= config.batch_size:
                batch = buffer.sample(config.batch_size, rng)
                closs.append(critic_update(agent, batch, config.gamma, config.reward_scale, config.target_networks))
                aobj.append(actor_update(agent, batch))
                soft_update(agent, config.tau)
        log.add(ep, float(np.mean(rewards)), float(np.mean(closs)) if closs else 0.0,
                float(np.mean(aobj)) if aobj else 0.0, len(buffer))
        if progress is not None:
            progress(ep, log.rows[-1])
    return agent, log


@dataclass
class EvalResult:
    metrics: EpisodeMetrics
    latency_ms: float

    @property
    def summary(self) -> dict:
        m = self.metrics
        return {"steps": m.n_steps, "mean_reward": m.mean_reward, "loss_mean_mw": m.loss_mean,
                "loss_std_mw": m.loss_std, "violations": m.total_violations, "vvr": m.vvr,
                "v_min": m.v_min, "v_max": m.v_max, "latency_ms": self.latency_ms}


def evaluate(agent: Agent, env: VVEnv, days=None) -> EvalResult:
    """Greedy rollout over ``days`` (default: all days of ``env``)."""
    days = range(env.n_days) if days is None else days
    metrics = EpisodeMetrics(env.net.n_bus)
    elapsed = 0.0
    decisions = 0
    for d in days:
        s = env.reset(int(d))
        done = False
        while not done:
            t0 = time.perf_counter()
            _, action = act(agent, s, 0.0, None, q_limits(env.net, env.forecast_pv()))
            elapsed += time.perf_counter() - t0
            decisions += 1
            out = env.step(action)
            metrics.add(out.info)
            s, done = out.state, out.done
    return EvalResult(metrics, 1000.0 * elapsed / max(decisions, 1))


# -- persistence ---------------------------------------------------------------

def layout_hash(env: VVEnv) -> str:
    doc = {"obs_dim": env.obs_dim, "state_dim": env.state_dim, "channels": list(env.intervals.channels),
           "bus_ids": env.net.bus_ids, "n_caps": env.n_caps, "n_inv": env.n_inv}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def save(agent: Agent, directory, config: TrainConfig, feature_hash: str = "") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "actor.vvnn").write_bytes(nn.serialize(agent.actor))
    (d / "critic.vvnn").write_bytes(nn.serialize(agent.critic))
    meta = {"format": 1, "obs_dim": agent.obs_dim, "head": asdict(agent.head), "config": config.to_dict(),
            "seed": config.seed, "feature_layout": feature_hash}
    (d / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load(directory) -> tuple[Agent, dict]:
    d = Path(directory)
    meta = json.loads((d / "model.json").read_text())
    actor = nn.deserialize((d / "actor.vvnn").read_bytes())
    critic = nn.deserialize((d / "critic.vvnn").read_bytes())
    head = ActionHead(**meta["head"])
    if actor.n_in != meta["obs_dim"] or actor.n_out != head.width:
        raise nn.ModelFormatError("actor shape does not match model.json")
    if critic.n_in != meta["obs_dim"] + head.width or critic.n_out != 1:
        raise nn.ModelFormatError("critic shape does not match model.json")
    cfg = TrainConfig.from_dict(meta["config"])
    agent = Agent(head, meta["obs_dim"], actor, critic, actor.copy(), critic.copy(),
                  nn.adam_init(actor, cfg.lr_actor), nn.adam_init(critic, cfg.lr_critic))
    return agent, meta
