"""Command-line entry points: train, eval, bench-maxq, verify.

Config files are flat ``key = value`` text; ``#`` starts a comment. Keys are
the AgentConfig field names plus the run keys in ``RUN_DEFAULTS``. Flags
override the file. Every training run echoes the resolved config as
``config.txt`` in its output directory, which can be fed back with ``--config``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agent import AgentConfig, TrainingAborted, evaluate, train
from .approx import CemConfig, GaConfig, solve_maxq_cem, solve_maxq_ga
from .env import ENVS, make_env
from .mip import solve_maxq_mip
from .net import act, load_checkpoint
from .verify import ALIASES, SUITES

RUN_DEFAULTS: dict[str, object] = {
    "env": "pendulum",
    "action_range": None,  # environment default
    "steps": 50_000,
    "seeds": (0,),
    "out": "runs/caql",
    "eval_interval": 1000,
    "eval_episodes": 10,
    "checkpoint_interval": None,
    "stop_return": None,  # end a seed early once mean_return reaches this
}
AGENT_FIELDS = {f.name: f for f in dataclasses.fields(AgentConfig)}
OPTIONAL_FLOATS = {"action_range", "cluster_radius", "stop_return"}
OPTIONAL_PAIRS = {"dtol", "cluster_decay"}
INT_TUPLES = {"widths", "seeds"}


class UsageError(ValueError):
    pass


def _is_none(text: str) -> bool:
    return text.strip().lower() in ("", "none", "null")


def parse_value(key: str, text: str):
    """Convert the text of one config entry to the type its key expects."""
    try:
        return _parse(key, text.strip())
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None


def _parse(key: str, text: str):
    if key in OPTIONAL_FLOATS:
        return None if _is_none(text) else float(text)
    if key in OPTIONAL_PAIRS:
        if _is_none(text):
            return None
        parts = [float(p) for p in text.replace(",", " ").split()]
        if len(parts) != 2:
            raise UsageError(f"{key} needs two numbers, got {text!r}")
        return tuple(parts)
    if key in INT_TUPLES:
        return tuple(int(p) for p in text.replace("x", " ").replace(",", " ").split())
    if key == "checkpoint_interval":
        return None if _is_none(text) else int(text)
    default = AGENT_FIELDS[key].default if key in AGENT_FIELDS else RUN_DEFAULTS.get(key)
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key} expects a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def known_keys() -> list[str]:
    return list(RUN_DEFAULTS) + list(AGENT_FIELDS)


def read_config(path: str | Path) -> dict[str, object]:
    out: dict[str, object] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known_keys():
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = parse_value(key, value)
    return out


def write_config(values: dict[str, object], path: str | Path) -> None:
    lines = ["# resolved caql configuration"]
    lines += [f"{k} = {format_value(values[k])}" for k in known_keys()]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(file_values: dict, overrides: dict) -> tuple[dict, AgentConfig]:
    values: dict[str, object] = dict(RUN_DEFAULTS)
    values.update({k: f.default for k, f in AGENT_FIELDS.items()})
    values.update(file_values)
    values.update(overrides)
    if values["env"] not in ENVS:
        raise UsageError(f"unknown environment {values['env']!r}")
    try:
        agent = AgentConfig(**{k: values[k] for k in AGENT_FIELDS})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return values, agent


def _env_factory(name: str, action_range):
    return lambda seed: make_env(name, action_range, seed=seed)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    overrides = {}
    for key in known_keys():
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = parse_value(key, v)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in known_keys():
            raise UsageError(f"unknown key {key!r}")
        overrides[key] = parse_value(key, value)
    values, agent = resolve(file_values, overrides)
    out = Path(str(values["out"]))
    out.mkdir(parents=True, exist_ok=True)
    write_config(values, out / "config.txt")
    factory = _env_factory(str(values["env"]), values["action_range"])
    target = values["stop_return"]
    stop = None if target is None else (lambda recs: recs[-1]["mean_return"] >= target)
    status = 0
    for seed in values["seeds"]:  # type: ignore[union-attr]
        run_dir = out / f"seed_{seed}"
        try:
            res = train(agent, factory, int(seed), int(values["steps"]), out_dir=run_dir,
                        eval_interval=int(values["eval_interval"]),
                        eval_episodes=int(values["eval_episodes"]),
                        checkpoint_interval=values["checkpoint_interval"], stop=stop)
        except TrainingAborted as exc:
            print(f"seed {seed}: aborted ({exc}); see {run_dir / 'abort.json'}", file=sys.stderr)
            status = 1
            continue
        last = res.records[-1]
        print(f"seed {seed}: {res.steps} steps, final return {last['mean_return']:.1f} "
              f"+- {last['std_return']:.1f} -> {run_dir}")
    return status


def cmd_eval(args) -> int:
    policy = load_checkpoint(args.policy)
    env = make_env(args.env, args.action_range, seed=0)
    rets = evaluate(_env_factory(args.env, args.action_range), policy, env.box, args.episodes,
                    args.episode_length, args.seed)
    print(json.dumps({"mean_return": float(rets.mean()), "std_return": float(rets.std()),
                      "returns": rets.tolist()}))
    return 0


def sample_states(env_name: str, action_range, n: int, seed: int, policy=None,
                  length: int = 200) -> np.ndarray:
    """States visited by rollouts of ``policy`` (uniform random actions if None)."""
    rng = np.random.default_rng(seed)
    states = []
    k = 0
    while len(states) < n:
        env = make_env(env_name, action_range, seed=seed + k)
        x = env.reset()
        for _ in range(length):
            states.append(x)
            a = env.box.clip(act(policy, x)) if policy is not None else env.box.sample(rng)
            x, _, _ = env.step(a)
        k += 1
    idx = rng.choice(len(states), size=n, replace=False)
    return np.array(states)[idx]


def bench_maxq(net, X, box, optimizers, policy=None, seed: int = 0, gap_tol: float = 1e-4,
               time_limit: float = 60.0) -> dict[str, dict]:
    """Time each optimizer per state and compare its value with the MIP optimum."""
    mip = [solve_maxq_mip(net, x, box, gap_tol=gap_tol, time_limit=time_limit) for x in X]
    rng = np.random.default_rng(seed)
    report: dict[str, dict] = {}
    for name in optimizers:
        if name == "mip":
            sols = mip
        elif name == "ga":
            seeds = box.clip(act(policy, X)) if policy is not None else np.repeat(box.center[None], len(X), 0)
            sols = [solve_maxq_ga(net, x, box, GaConfig(), seed_action=s, rng=rng) for x, s in zip(X, seeds)]
        elif name == "cem":
            sols = [solve_maxq_cem(net, x, box, CemConfig(), seed=seed) for x in X]
        else:
            raise UsageError(f"unknown optimizer {name!r}")
        ms = np.array([1e3 * s.elapsed for s in sols])
        gaps = np.array([m.value - s.value for m, s in zip(mip, sols)])
        report[name] = {
            "median_ms": float(np.median(ms)), "sd_ms": float(np.std(ms)),
            "mean_gap": float(np.mean(gaps)), "max_gap": float(np.max(gaps)),
            "min_gap": float(np.min(gaps)),
            "dominance_violations": int(sum(s.value > m.value + m.gap + 1e-6 for m, s in zip(mip, sols))),
            "median_iters": float(np.median([s.nodes_or_iters for s in sols])),
        }
    return report


def cmd_bench(args) -> int:
    net = load_checkpoint(args.checkpoint)
    policy = load_checkpoint(args.policy) if args.policy else None
    box = make_env(args.env, args.action_range).box
    X = sample_states(args.env, args.action_range, args.samples, args.seed, policy)
    report = bench_maxq(net, X, box, [o.strip() for o in args.optimizers.split(",")], policy, args.seed)
    print(f"{'solver':<6} {'med_ms':>9} {'sd_ms':>9} {'mean_gap':>10} {'max_gap':>10} {'iters':>6}")
    for name, row in report.items():
        print(f"{name:<6} {row['median_ms']:9.3f} {row['sd_ms']:9.3f} {row['mean_gap']:10.2e} "
              f"{row['max_gap']:10.2e} {row['median_iters']:6.0f}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1))
    return 1 if any(r["dominance_violations"] for r in report.values()) else 0


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [ALIASES.get(args.suite, args.suite)]
    ok = True
    for name in names:
        res = SUITES[name](args.count, args.seed)
        print(f"{res.name}: {res.passed}/{res.total} passed (worst {res.worst:.3g}) "
              f"{'PASS' if res.ok else 'FAIL'}")
        ok &= res.ok
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caql", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train CAQL agents")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--optimizer", dest="solver", choices=["mip", "ga", "cem", "dual"])
    t.add_argument("--seed", dest="seeds", help="seed or comma-separated seeds")
    for key in known_keys():
        if key in ("solver", "seeds"):
            continue
        t.add_argument("--" + key.replace("_", "-"), dest=key, metavar=key.upper())
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate an action-function checkpoint")
    e.add_argument("--policy", required=True)
    e.add_argument("--env", default="pendulum", choices=sorted(ENVS))
    e.add_argument("--action-range", type=float)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--episode-length", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-maxq", help="time max-Q solvers on a Q-network checkpoint")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--policy", help="action-function checkpoint for GA seeds and state sampling")
    b.add_argument("--env", default="pendulum", choices=sorted(ENVS))
    b.add_argument("--action-range", type=float)
    b.add_argument("--samples", type=int, default=100)
    b.add_argument("--optimizers", default="mip,cem,ga")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", help="also write the report here")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", required=True,
                   choices=["all", *SUITES, *ALIASES])
    v.add_argument("--count", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    return 2


if __name__ == "__main__":
    sys.exit(main())
