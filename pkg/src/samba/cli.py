"""Command line entry point: ``samba {train,evaluate,heatmap,export-traces,compare}``."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .analysis import compare, default_grid, evaluate, export_traces, heatmap
from .config import default_config, dump_config, load_config
from .gp import load_model
from .metrics import GridAxis, GridSpec
from .policy import PolicyBundle
from .training import train


def _config(path, env_name=None):
    cfg = load_config(path) if path else default_config(env_name or "safe_pendulum")
    if env_name:
        cfg.env.name = env_name
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.runner.seed = args.seed
    if args.ablation:
        cfg = cfg.ablation()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, log = train(cfg, out, verbose=not args.quiet)
    print(f"wrote {out} ({log.cumulative_samples} real samples)")
    return 1 if log.nan_flag else 0


def cmd_evaluate(args) -> int:
    cfg = _config(args.config, args.env)
    bundle, _ = PolicyBundle.load(args.policy)
    if not args.env and not args.config and bundle.env_name:
        cfg = _config(None, bundle.env_name)
    env = cfg.make_env()
    report = evaluate(
        bundle, env, args.samples, args.seeds, gamma=cfg.agent.gamma, alpha=cfg.agent.alpha,
        xi=cfg.agent.xi, max_len=cfg.runner.max_len, deterministic=not args.stochastic, out_dir=args.out,
    )
    for row in report.rows():
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_heatmap(args) -> int:
    model, meta = load_model(args.model)
    env_name = args.env or meta.get("env_name") or "safe_pendulum"
    env = _config(args.config, env_name).make_env()
    grid = default_grid(env, args.resolution)
    if args.axes:
        d0, d1 = args.axes
        grid = GridSpec(GridAxis(d0, *args.range0, args.resolution), GridAxis(d1, *args.range1, args.resolution),
                        grid.base_state, grid.actions)
    heatmap(args.model, args.metric, env, args.out, grid, seed=args.seed)
    print(f"wrote {args.out}")
    return 0


def cmd_export_traces(args) -> int:
    _, meta = load_model(args.model)
    env_name = args.env or meta.get("env_name") or "safe_pendulum"
    env = _config(args.config, env_name).make_env()
    export_traces(args.model, env, args.traces, args.horizon, args.out, seed=args.seed)
    print(f"wrote {args.out}")
    return 0


def cmd_compare(args) -> int:
    rows, absent = compare(args.runs, args.out)
    for name in absent:
        print(f"no evaluation report in run {name}", file=sys.stderr)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def cmd_config(args) -> int:
    dump_config(default_config(args.env), args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samba", description="Safe active model-based policy search.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="YAML run config (defaults if omitted)")
    t.add_argument("--seed", type=int, help="overrides runner.seed")
    t.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    t.add_argument("--ablation", action="store_true", help="disable the CVaR penalty and exploration")
    t.add_argument("--quiet", action="store_true", help="suppress per-iteration progress")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a policy checkpoint")
    e.add_argument("--policy", required=True, help="policy checkpoint (.npz)")
    e.add_argument("--config", help="YAML config supplying the environment")
    e.add_argument("--env", help="environment name if no config is given")
    e.add_argument("--samples", type=int, default=10000, help="minimum real steps per seed")
    e.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="evaluation seeds")
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    e.add_argument("--out", required=True, help="directory for eval_report.csv and trajectory logs")
    e.set_defaults(func=cmd_evaluate)

    h = sub.add_parser("heatmap", help="export an exploration-metric grid")
    h.add_argument("--model", required=True, help="model checkpoint (.npz)")
    h.add_argument("--metric", choices=["loo", "bootstrap", "entropy"], default="loo")
    h.add_argument("--config", help="YAML config supplying the environment")
    h.add_argument("--env", help="environment name if no config is given")
    h.add_argument("--resolution", type=int, default=50, help="cells per axis")
    h.add_argument("--axes", type=int, nargs=2, metavar=("DIM0", "DIM1"), help="state dimensions on the two axes")
    h.add_argument("--range0", type=float, nargs=2, default=[-math.pi, math.pi],
                   help="range of the first axis")
    h.add_argument("--range1", type=float, nargs=2, default=[-8.0, 8.0], help="range of the second axis")
    h.add_argument("--seed", type=int, default=0, help="seed for bootstrap partitions")
    h.add_argument("--out", required=True, help="output CSV path")
    h.set_defaults(func=cmd_heatmap)

    x = sub.add_parser("export-traces", help="replay a random real rollout open loop through the model")
    x.add_argument("--model", required=True, help="model checkpoint (.npz)")
    x.add_argument("--config", help="YAML config supplying the environment")
    x.add_argument("--env", help="environment name if no config is given")
    x.add_argument("--traces", type=int, default=10, help="model replays of the real rollout")
    x.add_argument("--horizon", type=int, default=30, help="steps per trace")
    x.add_argument("--seed", type=int, default=0, help="seed for the real rollout and model noise")
    x.add_argument("--out", required=True, help="output CSV path")
    x.set_defaults(func=cmd_export_traces)

    c = sub.add_parser("compare", help="merge evaluation reports of several runs")
    c.add_argument("runs", nargs="+", help="run directories holding eval_report.csv")
    c.add_argument("--out", required=True, help="merged CSV path")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("config", help="write the default config to a file")
    g.add_argument("--env", default="safe_pendulum", help="environment name")
    g.add_argument("--out", required=True, help="YAML path to write")
    g.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
