"""Evaluation, metric heatmaps, open-loop trace export and run comparison."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cvar import cvar_empirical
from .envs import SafeEnv, Trajectory, write_trajectories_csv
from .gp import GPModel, load_model, predict
from .metrics import GridAxis, GridSpec, file_sha256, make_metric, metric_grid, write_grid_csv
from .policy import PolicyBundle

REPORT_FIELDS = [
    "seed", "samples", "trajectories", "tv", "tc", "loss_q25", "loss_q50", "loss_q75",
    "loss_mean", "loss_cvar", "cost_return", "exp_constraint", "cvar_constraint",
]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SeedReport:
    seed: str
    samples: int
    trajectories: int
    tv: int
    tc: float
    loss_q25: float
    loss_q50: float
    loss_q75: float
    loss_mean: float
    loss_cvar: float
    cost_return: float
    xi: float

    @property
    def exp_constraint(self) -> bool:
        return self.loss_mean <= self.xi

    @property
    def cvar_constraint(self) -> bool:
        return self.loss_cvar <= self.xi

    def row(self) -> dict:
        out = {k: getattr(self, k) for k in REPORT_FIELDS}
        out["exp_constraint"] = int(self.exp_constraint)
        out["cvar_constraint"] = int(self.cvar_constraint)
        return out


def summarize(seed, trajs: Sequence[Trajectory], gamma: float, alpha: float, xi: float) -> SeedReport:
    """Aggregate TV, TC and the distribution of discounted trajectory losses."""
    losses = np.array([t.discounted_safety_loss(gamma) for t in trajs])
    q25, q50, q75 = np.quantile(losses, [0.25, 0.5, 0.75])
    cvar, _ = cvar_empirical(losses, alpha)
    return SeedReport(
        seed=str(seed), samples=int(sum(len(t) for t in trajs)), trajectories=len(trajs),
        tv=int(sum(t.total_violations for t in trajs)), tc=float(sum(t.total_safety_cost for t in trajs)),
        loss_q25=float(q25), loss_q50=float(q50), loss_q75=float(q75), loss_mean=float(losses.mean()),
        loss_cvar=float(cvar), cost_return=float(np.mean([t.discounted_cost(gamma) for t in trajs])), xi=xi,
    )


@dataclass
class EvalReport:
    per_seed: list[SeedReport]
    overall: SeedReport
    trajectories: dict = field(default_factory=dict, repr=False)

    def rows(self) -> list[dict]:
        return [r.row() for r in self.per_seed] + [self.overall.row()]

    def write(self, path) -> None:
        _write_csv(path, REPORT_FIELDS, self.rows())


def _as_policy(policy, env: SafeEnv, rng, deterministic: bool) -> Callable:
    if isinstance(policy, PolicyBundle):
        if policy.env_name and policy.env_name != env.name:
            raise ValueError(f"checkpoint was trained on {policy.env_name!r}, not {env.name!r}")
        return lambda s: policy.act(env.observe(s), rng, deterministic)

    def wrapped(state):
        a = np.asarray(policy(state), dtype=float).reshape(env.action_dim)
        return a, a, 0.0
    return wrapped


def evaluate(policy, env: SafeEnv, n_samples: int = 10000, seeds: Sequence[int] = (0, 1, 2), *,
             gamma: float = 0.99, alpha: float = 0.9, xi: float = 0.025, max_len: int = 30,
             deterministic: bool = True, out_dir=None) -> EvalReport:
    """Roll out until at least ``n_samples`` steps per seed and summarise safety.

    ``policy`` is a ``PolicyBundle`` (or a path to one) or any callable
    mapping a state to an action.
    """
    if isinstance(policy, (str, Path)):
        policy, _ = PolicyBundle.load(policy)
    per_seed, pooled, logs = [], [], {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        act = _as_policy(policy, env, rng, deterministic)
        trajs, steps = [], 0
        while steps < n_samples:
            tr = env.rollout(act, rng, max_len)
            trajs.append(tr)
            steps += len(tr)
        per_seed.append(summarize(seed, trajs, gamma, alpha, xi))
        pooled += trajs
        logs[seed] = trajs
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_trajectories_csv(Path(out_dir) / f"eval_trajectories_seed{seed}.csv", trajs, env)
    report = EvalReport(per_seed, summarize("all", pooled, gamma, alpha, xi), logs)
    if out_dir is not None:
        report.write(Path(out_dir) / "eval_report.csv")
    return report


# ---------------------------------------------------------------------------
# heatmaps


def default_grid(env: SafeEnv, resolution: int = 50) -> GridSpec:
    """Monitored angle against its velocity, other dimensions at rest hanging down."""
    d = env.monitored_dim
    base = np.zeros(env.state_dim)
    for a in env.angle_dims:
        base[a] = math.pi
    vmax = getattr(getattr(env, "params", None), "max_speed", 8.0)
    return GridSpec(GridAxis(d, -math.pi, math.pi, resolution), GridAxis(d + 1, -vmax, vmax, resolution),
                    tuple(base), (0.0,))


def decode_states(env: SafeEnv, feats) -> np.ndarray:
    """Recover states from model inputs (inverse of the angle embedding)."""
    feats = np.atleast_2d(feats)
    cols, i = [], 0
    for d in range(env.state_dim):
        if d in env.angle_dims:
            cols.append(np.arctan2(feats[:, i + 1], feats[:, i]))
            i += 2
        else:
            cols.append(feats[:, i])
            i += 1
    return np.stack(cols, axis=1)


def heatmap(model: GPModel | str | Path, metric: str, env: SafeEnv, out_csv, grid: GridSpec | None = None,
            seed: int = 0, n_partitions: int = 8):
    """Evaluate ``metric`` on a state grid; writes the grid CSV, sidecar and training scatter."""
    ckpt_hash = ""
    if isinstance(model, (str, Path)):
        ckpt_hash = file_sha256(model)
        model, _ = load_model(model)
    if metric not in ("loo", "bootstrap", "entropy"):
        raise ValueError(f"unknown metric {metric!r}; choose from loo, bootstrap, entropy")
    grid = grid or default_grid(env)
    fn = make_metric(metric, model, n_partitions=n_partitions, rng=np.random.default_rng(seed))
    result = metric_grid(fn, grid, env, metric)
    meta = {
        "checkpoint_sha256": ckpt_hash, "seed": seed, "n_train": model.n_train,
        "usr": [env.spec.usr_min, env.spec.usr_max], "hazard": [env.spec.hz_min, env.spec.hz_max],
    }
    write_grid_csv(out_csv, result, meta)
    states = decode_states(env, model.data.inputs) if model.n_train else np.zeros((0, env.state_dim))
    with open(f"{out_csv}.train.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"s{d}" for d in range(env.state_dim)])
        for s in states:
            writer.writerow([repr(float(v)) for v in s])
    return result


# ---------------------------------------------------------------------------
# open-loop traces


def export_traces(model: GPModel | str | Path, env: SafeEnv, n_traces: int, horizon: int, out_csv=None,
                  seed: int = 0):
    """Replay one random-action real rollout open loop through the model.

    Returns ``(real_states, model_states, actions)`` with shapes
    (horizon+1, d), (n_traces, horizon+1, d) and (horizon, d_act).
    """
    if isinstance(model, (str, Path)):
        model, _ = load_model(model)
    rng = np.random.default_rng(seed)
    s0 = env.reset(rng)
    actions = rng.uniform(-env.action_bound, env.action_bound, size=(horizon, env.action_dim))
    real = np.empty((horizon + 1, env.state_dim))
    real[0] = s0
    for t in range(horizon):
        real[t + 1] = env.step(real[t], actions[t])
    sim = np.empty((n_traces, horizon + 1, env.state_dim))
    sim[:, 0] = s0
    for t in range(horizon):
        feats = env.features(sim[:, t], np.repeat(actions[t][None], n_traces, axis=0))
        post = predict(model, feats)
        delta = model.data.denormalize_targets(post.mean + np.sqrt(post.var) * rng.standard_normal(post.mean.shape))
        sim[:, t + 1] = env.apply_delta(sim[:, t], delta)
    if out_csv is not None:
        cols = [f"s{d}" for d in range(env.state_dim)]
        acols = [f"a{d}" for d in range(env.action_dim)]
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "trace", "t", *cols, *acols])
            blank = [""] * env.action_dim

            def emit(source, k, states):
                for t, s in enumerate(states):
                    a = [repr(float(v)) for v in actions[t]] if t < horizon else blank
                    writer.writerow([source, k, t, *(repr(float(v)) for v in s), *a])
            emit("real", 0, real)
            for k in range(n_traces):
                emit("model", k, sim[k])
    return real, sim, actions


# ---------------------------------------------------------------------------
# comparison


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compare(run_dirs: Sequence, out_csv, names: Sequence[str] | None = None) -> tuple[list[dict], list[str]]:
    """Merge ``eval_report.csv`` from several runs into one table.

    Runs without a report are returned in the second list and get no rows.
    """
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    names = list(names) if names else [Path(d).name for d in run_dirs]
    rows, absent = [], []
    for name, d in zip(names, run_dirs):
        path = Path(d) / "eval_report.csv"
        if not path.exists():
            absent.append(name)
            continue
        rows += [{"run": name, **r} for r in read_report(path)]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["run", *REPORT_FIELDS])
        writer.writeheader()
        writer.writerows(rows)
    if absent:
        with open(f"{out_csv}.absent.json", "w") as fh:
            json.dump(absent, fh)
    return rows, absent
