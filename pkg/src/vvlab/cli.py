"""Command-line entry point: ``vvlab <subcommand> [options]``.

Settings come from (lowest to highest precedence) built-in defaults, the JSON
file given by ``--config``, the ``VVLAB_SEED`` environment variable (seed only)
and command-line flags. Every run writes ``resolved_config.json`` next to its
outputs. Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "seed": None,
    "network": None,
    "data_dir": None,
    "model_dir": None,
    "out": None,
    "days": 20,
    "train_fraction": 0.7,
    "scenario": {},
    "conformal": {},
    "train": {},
    "costs": {},
    "eval": {"zero_width": False},
    "oracle": {"taps": [-4, 4], "q_levels": 5, "max_steps": None},
}


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


# -- configuration -----------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise UsageError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and k not in ("scenario", "conformal", "train", "costs"):
            if not isinstance(v, dict):
                raise UsageError(f"config key {k!r} must be an object")
            unknown = set(v) - set(out[k])
            if unknown:
                raise UsageError(f"unknown keys in {k!r}: {sorted(unknown)}")
            out[k].update(v)
        elif isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {k!r} must be an object")
            out[k].update(v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, doc)
    env_seed = os.environ.get("VVLAB_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"VVLAB_SEED must be an integer, got {env_seed!r}") from None
    for key, dest in (("seed", "seed"), ("network", "network"), ("data_dir", "data"), ("model_dir", "model"),
                      ("out", "out"), ("days", "days"), ("train_fraction", "train_fraction")):
        val = getattr(args, dest, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "noise", None) is not None:
        cfg["scenario"]["forecast_noise"] = args.noise
    if getattr(args, "alpha", None) is not None:
        cfg["conformal"]["alpha"] = args.alpha
    if getattr(args, "episodes", None) is not None:
        cfg["train"]["episodes"] = args.episodes
    if getattr(args, "zero_width", False):
        cfg["eval"]["zero_width"] = True
    if getattr(args, "taps", None) is not None:
        cfg["oracle"]["taps"] = _parse_range(args.taps)
    if getattr(args, "q_levels", None) is not None:
        cfg["oracle"]["q_levels"] = args.q_levels
    if getattr(args, "max_steps", None) is not None:
        cfg["oracle"]["max_steps"] = args.max_steps
    return cfg


def _parse_range(text: str) -> list[int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--taps expects LO:HI, got {text!r}") from None
    return [lo, hi]


def _require(cfg: dict, key: str, flag: str):
    if cfg.get(key) is None:
        raise UsageError(f"{flag} is required (or set {key!r} in --config)")
    return cfg[key]


def _build(cls, doc: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise UsageError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section!r} settings: {exc}") from None


def _write_config(cfg: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _network(cfg):
    from .netmodel import load_network
    return load_network(_require(cfg, "network", "--network"))


def _data_paths(cfg):
    d = Path(_require(cfg, "data_dir", "--data"))
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    return d


def _read_series(d: Path):
    from .scenario import ForecastSet, read_timeseries
    for name in ("truth.csv", "forecast.csv"):
        if not (d / name).exists():
            raise UsageError(f"{d / name} not found; run generate-data first")
    return read_timeseries(d / "truth.csv"), read_timeseries(d / "forecast.csv", ForecastSet)


def _datasets(cfg, need_intervals=True):
    from . import conformal as cp
    from .experiment import Datasets
    from .scenario import SplitSpec, check_matches, split_days

    net = _network(cfg)
    d = _data_paths(cfg)
    truth, fcst = _read_series(d)
    try:
        check_matches(truth, net)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    spec = _build(SplitSpec, {"train_fraction": cfg["train_fraction"]}, "train_fraction")
    ttr, tte = split_days(truth, spec)
    ftr, fte = split_days(fcst, spec)
    if not need_intervals:
        return net, ttr, tte, ftr, fte
    if not (d / "intervals.csv").exists():
        raise UsageError(f"{d / 'intervals.csv'} not found; run fit-conformal first")
    iv = cp.read_intervals(d / "intervals.csv")
    if len(iv) != len(truth) or iv.channels != cp.channel_names(net):
        raise UsageError("intervals.csv does not match the data or network")
    k = len(ttr)
    return Datasets(net, ttr, tte, ftr, fte, iv.slice(0, k), iv.slice(k, len(iv)))


# -- subcommands -------------------------------------------------------------

def cmd_generate_data(cfg):
    from . import scenario as sc
    seed = int(_require(cfg, "seed", "--seed"))
    net = _network(cfg)
    out = Path(_require(cfg, "data_dir", "--out"))
    scfg = _build(sc.ScenarioConfig, cfg["scenario"], "scenario")
    days = int(cfg["days"])
    if days < 2:
        raise UsageError("--days must be at least 2")
    truth = sc.generate(net, days, seed, scfg)
    fcst = sc.make_forecasts(truth, scfg.forecast_noise, seed + 1)
    out.mkdir(parents=True, exist_ok=True)
    sc.write_timeseries(truth, out / "truth.csv")
    sc.write_timeseries(fcst, out / "forecast.csv")
    sc.write_manifest(out / "manifest.json", seed=seed, days=days, config=scfg, network=str(cfg["network"]),
                      created=dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"))
    _write_config(cfg, out)
    print(f"wrote {len(truth)} steps to {out}")


def cmd_fit_conformal(cfg):
    from . import conformal as cp
    from .scenario import SplitSpec, split_days
    seed = int(_require(cfg, "seed", "--seed"))
    net, ttr, tte, _, _ = _datasets(cfg, need_intervals=False)
    ccfg = _build(cp.ConformalConfig, {"seed": seed, **cfg["conformal"]}, "conformal")
    itr, ite = cp.fit_channels(ttr, tte, net, ccfg)
    d = _data_paths(cfg)
    out = Path(cfg["out"]) if cfg["out"] else d / "intervals.csv"
    cp.write_intervals([itr, ite], out)
    _write_config(cfg, out.parent)
    for name, iv, ts in (("train", itr, ttr), ("test", ite, tte)):
        y = cp.channel_matrix(ts, net)
        cover = float(np.mean((y >= iv.lower) & (y <= iv.upper)))
        print(f"{name}: {len(iv)} steps, coverage {cover:.4f}")


def cmd_train(cfg):
    from . import ddpg
    seed = int(_require(cfg, "seed", "--seed"))
    model_dir = Path(_require(cfg, "model_dir", "--out"))
    try:
        tcfg = ddpg.TrainConfig.from_dict({**cfg["train"], "seed": seed})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid 'train' settings: {exc}") from None
    costs = _costs(cfg)
    ds = _datasets(cfg)
    env = ds.env("train", cfg["eval"]["zero_width"], costs)
    agent, log = ddpg.train(env, tcfg)
    ddpg.save(agent, model_dir, tcfg, ddpg.layout_hash(env))
    log.write(model_dir / "train_log.csv")
    _write_config(cfg, model_dir)
    last = log.mean_rewards()[-10:]
    print(f"trained {tcfg.episodes} episodes; last-10 mean reward {float(np.mean(last)) if len(last) else 0.0:.4f}")


def _costs(cfg):
    from .vvenv import CostConfig
    return _build(CostConfig, cfg["costs"], "costs")


def _load_agent(cfg, env):
    from . import ddpg
    from .neural import ModelFormatError
    mdir = Path(_require(cfg, "model_dir", "--model"))
    try:
        agent, meta = ddpg.load(mdir)
    except FileNotFoundError as exc:
        raise UsageError(f"model file missing: {exc.filename}") from None
    except (ModelFormatError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"unreadable model in {mdir}: {exc}") from None
    if meta.get("feature_layout") != ddpg.layout_hash(env):
        raise UsageError("model was trained on a different feature layout")
    return agent


def cmd_evaluate(cfg):
    from . import ddpg
    from .vvenv import write_eval_log
    ds = _datasets(cfg)
    env = ds.env("test", cfg["eval"]["zero_width"], _costs(cfg))
    agent = _load_agent(cfg, env)
    out = Path(_require(cfg, "out", "--out"))
    res = ddpg.evaluate(agent, env)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_log(res.metrics.records, out / "eval_log.csv", env.n_inv)
    summary = res.summary
    summary["n_bus"] = env.net.n_bus
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_config(cfg, out)
    print(json.dumps(summary, sort_keys=True))


def cmd_powerflow(cfg, args):
    from . import powerflow as pf
    from .netmodel import build_admittance, series_admittance
    net = _network(cfg)
    if args.injections is None:
        raise UsageError("--injections is required")
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    try:
        with open(args.injections, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != ("bus_id", "p_kw", "q_kvar"):
                raise UsageError(f"{args.injections}: expected columns bus_id,p_kw,q_kvar")
            for lineno, row in enumerate(reader, start=2):
                try:
                    k = net.index(int(row["bus_id"]))
                    p[k] += float(row["p_kw"])
                    q[k] += float(row["q_kvar"])
                except (KeyError, ValueError) as exc:
                    raise UsageError(f"{args.injections}: line {lineno}: {exc}") from None
    except FileNotFoundError:
        raise UsageError(f"injections file not found: {args.injections}") from None
    caps = [0] * len(net.capacitors)
    if args.caps:
        try:
            caps = [int(c) for c in args.caps.split(",")]
        except ValueError:
            raise UsageError("--caps expects comma-separated 0/1 values") from None
        if len(caps) != len(net.capacitors) or any(c not in (0, 1) for c in caps):
            raise UsageError(f"--caps needs {len(net.capacitors)} values of 0 or 1")
    try:
        v_ref = net.regulator.voltage(args.tap)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    Y = build_admittance(net, np.array(caps, dtype=int))
    sol = pf.solve(Y, net.kw_to_pu(p), net.kw_to_pu(q), v_ref)
    lines = ["bus_id,vm_pu,va_deg"]
    lines += [f"{b},{float(sol.vm[k])!r},{float(np.degrees(sol.va[k]))!r}" for k, b in enumerate(net.bus_ids)]
    text = "\n".join(lines) + "\n"
    if cfg["out"]:
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_config(cfg, out.parent)
    else:
        sys.stdout.write(text)
    msg = f"converged={sol.converged} iterations={sol.iterations} max_mismatch={sol.max_mismatch:.3e}"
    if sol.converged:
        loss = pf.compute_losses(Y, sol, [(i, j) for i, j, _ in series_admittance(net)], net.base_mva)
        msg += f" p_loss_mw={loss.p_loss:.6g} q_loss_mvar={loss.q_loss:.6g}"
    print(msg, file=sys.stderr)
    if not sol.converged:
        raise RuntimeError("power flow did not converge")


def cmd_oracle_compare(cfg):
    from . import baseline, experiment as ex
    from .netmodel import q_limits
    ds = _datasets(cfg)
    costs = _costs(cfg)
    env = ds.env("test", cfg["eval"]["zero_width"], costs)
    agent = _load_agent(cfg, env)
    out = Path(_require(cfg, "out", "--out"))
    o = cfg["oracle"]
    lo, hi = o["taps"]
    try:
        grid = baseline.ActionGrid.for_network(ds.net, range(int(lo), int(hi) + 1), int(o["q_levels"]))
    except ValueError as exc:
        raise UsageError(f"invalid oracle grid: {exc}") from None
    limit = o["max_steps"]
    rows = []
    done_all = False
    for day in range(env.n_days):
        s = env.reset(day)
        done = False
        while not done:
            g = env.global_step
            snap = ex.snapshot(env, g)
            oracle = baseline.exhaustive_vvo(ds.net, snap, grid, costs)
            iv_lo, iv_hi = env.intervals.lower[g], env.intervals.upper[g]
            fsnap = baseline.Snapshot(np.asarray(env.forecast.load_p[g]), np.asarray(env.forecast.load_q[g]),
                                      np.asarray(env.forecast.pv[g]))
            box = baseline.ScenarioBox.from_intervals(
                ds.net, fsnap, np.minimum(iv_lo, _channels(env, g)), np.maximum(iv_hi, _channels(env, g)))
            robust = baseline.robust_exhaustive(ds.net, box, grid, costs)
            robust_real = baseline.action_objective(ds.net, snap, robust.action, costs)
            _, action = _agent_act(agent, s, env, q_limits)
            out_step = env.step(action)
            agent_obj = -ex.operating_cost(out_step.info, costs)
            rows.append((g, oracle.objective, agent_obj, agent_obj - oracle.objective, robust_real))
            s, done = out_step.state, out_step.done
            if limit is not None and len(rows) >= int(limit):
                done_all = True
                break
        if done_all:
            break
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestep", "oracle_objective", "agent_objective", "gap", "robust_oracle_objective"))
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
    _write_config(cfg, out.parent)
    gaps = np.array([r[3] for r in rows])
    print(f"{len(rows)} steps; mean gap {float(gaps.mean()):.6f}")


def _channels(env, g):
    from .conformal import channel_matrix
    return channel_matrix(env.forecast.slice(g, g + 1), env.net)[0]


def _agent_act(agent, s, env, q_limits):
    from . import ddpg
    return ddpg.act(agent, s, 0.0, None, q_limits(env.net, env.forecast_pv()))


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vvlab", description="Volt-VAR control with conformal intervals and DDPG.")
    parser.add_argument("--version", action="version", version=f"vvlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, network=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="random seed (overrides config and VVLAB_SEED)")
        if network:
            p.add_argument("--network", help="network JSON file or bundled name (bus5, bus13)")

    p = sub.add_parser("generate-data", help="simulate load/PV truth and forecasts")
    common(p)
    p.add_argument("--days", type=int)
    p.add_argument("--noise", type=float, help="forecast noise standard deviation (fraction)")
    p.add_argument("--out", dest="data", help="output data directory")

    p = sub.add_parser("fit-conformal", help="fit interval ensembles on the training split")
    common(p)
    p.add_argument("--data", help="data directory from generate-data")
    p.add_argument("--alpha", type=float)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--out", help="intervals CSV (default: <data>/intervals.csv)")

    p = sub.add_parser("train", help="train the DDPG agent")
    common(p)
    p.add_argument("--data")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--zero-width", action="store_true", help="ablation: collapse intervals onto the forecast")
    p.add_argument("--out", dest="model", help="model output directory")

    p = sub.add_parser("evaluate", help="greedy evaluation on the test split")
    common(p)
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--zero-width", action="store_true")
    p.add_argument("--out", help="report directory")

    p = sub.add_parser("powerflow", help="solve one power flow")
    common(p)
    p.add_argument("--injections", help="CSV bus_id,p_kw,q_kvar of net injections (generation positive)")
    p.add_argument("--tap", type=int, default=0)
    p.add_argument("--caps", help="capacitor statuses, e.g. 1,0")
    p.add_argument("--out", help="voltage CSV (default: stdout)")

    p = sub.add_parser("oracle-compare", help="compare the agent with brute-force oracles per test step")
    common(p)
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--zero-width", action="store_true")
    p.add_argument("--taps", help="oracle tap range LO:HI, e.g. --taps=-4:4 (the default)")
    p.add_argument("--q-levels", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out", help="comparison CSV")
    return parser


COMMANDS = {
    "generate-data": cmd_generate_data,
    "fit-conformal": cmd_fit_conformal,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "oracle-compare": cmd_oracle_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("vvlab: error: a subcommand is required", file=sys.stderr)
        return EXIT_INVALID
    from .netmodel import NetworkError
    try:
        cfg = resolve_config(args)
        if args.command == "powerflow":
            cmd_powerflow(cfg, args)
        else:
            COMMANDS[args.command](cfg)
    except (UsageError, NetworkError) as exc:
        print(f"vvlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"vvlab {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
