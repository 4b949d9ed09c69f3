"""End-to-end plumbing shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baseline, conformal as cp, ddpg, scenario as sc
from .netmodel import Network, q_limits
from .vvenv import CostConfig, EpisodeMetrics, StepInfo, VVEnv


@dataclass
class Datasets:
    net: Network
    truth_train: sc.TimeSeriesSet
    truth_test: sc.TimeSeriesSet
    fcst_train: sc.TimeSeriesSet
    fcst_test: sc.TimeSeriesSet
    iv_train: cp.IntervalSet
    iv_test: cp.IntervalSet

    def env(self, part: str = "train", zero_width: bool = False, costs: CostConfig = CostConfig()) -> VVEnv:
        truth, fcst, iv = ((self.truth_train, self.fcst_train, self.iv_train) if part == "train"
                           else (self.truth_test, self.fcst_test, self.iv_test))
        return VVEnv(self.net, truth, fcst, cp.zero_width(fcst, self.net, iv.alpha) if zero_width else iv, costs)


def prepare(net: Network, days: int, seed: int, noise: float = 0.05,
            scenario: sc.ScenarioConfig = sc.ScenarioConfig(),
            conformal: cp.ConformalConfig = cp.ConformalConfig(),
            split: sc.SplitSpec = sc.SplitSpec()) -> Datasets:
    truth = sc.generate(net, days, seed, scenario)
    fcst = sc.make_forecasts(truth, noise, seed + 1)
    ttr, tte = sc.split_days(truth, split)
    ftr, fte = sc.split_days(fcst, split)
    itr, ite = cp.fit_channels(ttr, tte, net, conformal)
    return Datasets(net, ttr, tte, ftr, fte, itr, ite)


def operating_cost(info: StepInfo, costs: CostConfig) -> float:
    """Negated single-step objective without switching cost (the oracle's criterion)."""
    if not info.converged:
        return costs.reward_floor
    return -(costs.c_p * info.p_loss_mw + costs.c_v * info.violations)


def snapshot(env: VVEnv, g: int) -> baseline.Snapshot:
    return baseline.Snapshot(np.asarray(env.truth.load_p[g]), np.asarray(env.truth.load_q[g]),
                             np.asarray(env.truth.pv[g]))


def rollout(env: VVEnv, choose, days=None) -> EpisodeMetrics:
    """Run ``choose(env, state) -> ActionVector`` over whole days."""
    metrics = EpisodeMetrics(env.net.n_bus)
    for d in (range(env.n_days) if days is None else days):
        s = env.reset(int(d))
        done = False
        while not done:
            out = env.step(choose(env, s))
            metrics.add(out.info)
            s, done = out.state, out.done
    return metrics


def random_chooser(grid: baseline.ActionGrid, seed: int):
    stream = baseline.random_policy(grid, seed)
    return lambda env, s: next(stream).to_vector(env.q_limits_forecast())


def oracle_chooser(grid: baseline.ActionGrid, costs: CostConfig = CostConfig()):
    """Perfect-information single-step optimum on the true injections."""
    def choose(env, s):
        return baseline.exhaustive_vvo(env.net, snapshot(env, env.global_step), grid, costs).action
    return choose


def agent_chooser(agent: ddpg.Agent):
    def choose(env, s):
        return ddpg.act(agent, s, 0.0, None, q_limits(env.net, env.forecast_pv()))[1]
    return choose


def mean_operating_reward(metrics: EpisodeMetrics, costs: CostConfig = CostConfig()) -> float:
    return float(np.mean([operating_cost(r, costs) for r in metrics.records]))


def gap_closure(r_agent: float, r_random: float, r_oracle: float) -> float:
    gap = r_oracle - r_random
    if gap <= 0:
        raise ValueError("oracle does not beat the random policy; closure undefined")
    return (r_agent - r_random) / gap
