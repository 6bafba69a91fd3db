"""The outer training loop: real data, GP refit, model rollouts, policy updates."""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, dump_config
from .cvar import (
    CvarConfig, RolloutBatch, SolverState, UpdateConfig, cvar_empirical, min_norm_lambda,
    objective_gradients, policy_update, update_lambda_cvar,
)
from .envs import SafeEnv, Trajectory, write_trajectories_csv
from .gp import FitResult, GPModel, HyperBounds, ModelFitError, TransitionDataset, fit, predict, save_model
from .metrics import (
    build_bootstrap, build_workspace, entropy_baseline, predict_with_loo, zeta_bootstrap, zeta_loo,
)
from .policy import PolicyBundle, fit_critic, gae, mc_returns, normalize_advantages

DIVERGENCE_BOUND = 1e3


# ---------------------------------------------------------------------------
# logs


ENV_FIELDS = [
    "iteration", "real_samples", "cumulative_samples", "dataset_size", "real_tc", "real_tv",
    "real_cost_return", "fit_mll", "fit_iters",
]
CONTROL_FIELDS = [
    "iteration", "control", "lambda_pi", "lambda_cvar", "nu", "cvar", "mean_cost_return",
    "mean_zeta_return", "g_cost_norm", "g_zeta_norm", "policy_grad_norm", "cost_critic_loss",
    "zeta_critic_loss", "approx_kl", "diverged", "stationary", "nan_flag",
]


@dataclass
class RunLog:
    env_rows: list[dict] = field(default_factory=list)
    control_rows: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    nan_flag: bool = False
    aborted: str = ""

    @property
    def cumulative_samples(self) -> int:
        return self.env_rows[-1]["cumulative_samples"] if self.env_rows else 0

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        _write_rows(out / "run_log.csv", ENV_FIELDS, self.env_rows)
        _write_rows(out / "diagnostics.csv", CONTROL_FIELDS, self.control_rows)

    def scalar_streams(self) -> dict[str, list[float]]:
        """Every logged number, keyed by ``table.column``."""
        streams: dict[str, list[float]] = {}
        for table, rows, cols in (("env", self.env_rows, ENV_FIELDS), ("control", self.control_rows, CONTROL_FIELDS)):
            for col in cols:
                streams[f"{table}.{col}"] = [float(r[col]) for r in rows]
        return streams


def _write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# data collection


def policy_fn(bundle: PolicyBundle, env: SafeEnv, rng: np.random.Generator | None, deterministic: bool = False):
    """Adapter from a bundle to the ``state -> (action, raw, logp)`` rollout interface."""
    return lambda state: bundle.act(env.observe(state), rng, deterministic)


def transitions(env: SafeEnv, trajectories) -> tuple[np.ndarray, np.ndarray]:
    """Model inputs and successor deltas from real trajectories."""
    X = [env.features(t.states[:-1], t.actions) for t in trajectories if len(t)]
    Y = [env.state_delta(t.states[:-1], t.states[1:]) for t in trajectories if len(t)]
    if not X:
        return np.zeros((0, env.feature_dim)), np.zeros((0, env.state_dim))
    return np.vstack(X), np.vstack(Y)


def collect_real(env: SafeEnv, bundle: PolicyBundle, B: int, max_len: int, rng: np.random.Generator,
                 dataset: TransitionDataset | None = None, deterministic: bool = False):
    """Roll out ``B`` real trajectories and append their transitions to ``dataset``."""
    trajs = [env.rollout(policy_fn(bundle, env, rng, deterministic), rng, max_len) for _ in range(B)]
    X, Y = transitions(env, trajs)
    if dataset is None:
        dataset = TransitionDataset(X, Y)
    else:
        dataset = dataset.append(X, Y)
    return trajs, dataset


class _ZetaSource:
    """Posterior moments plus a pointwise exploration value for batched model steps."""

    def __init__(self, model: GPModel, metric: str, n_partitions: int = 8, rng=None, loo_subsample=None):
        self.model, self.metric = model, metric
        self.loo_subsample, self.rng = loo_subsample, rng
        if metric == "loo":
            self.ws = build_workspace(model)
        elif metric == "bootstrap":
            self.bws = build_bootstrap(model, n_partitions, rng)
        elif metric != "entropy":
            raise ValueError(f"unknown metric {metric!r}")

    def __call__(self, feats):
        if self.metric == "loo" and self.loo_subsample is None:
            return predict_with_loo(self.model, self.ws, feats)
        post = predict(self.model, feats)
        if self.metric == "loo":
            zeta = zeta_loo(self.model, self.ws, feats, subsample=self.loo_subsample, rng=self.rng)
        elif self.metric == "bootstrap":
            zeta = zeta_bootstrap(self.model, 0, feats, ws=self.bws)
        else:
            zeta = entropy_baseline(self.model, feats)
        return post.mean, post.var, zeta


def collect_model(model: GPModel, env: SafeEnv, bundle: PolicyBundle, N: int, max_len: int,
                  rng: np.random.Generator, zeta_source=None, metric: str = "loo") -> list[Trajectory]:
    """Sample ``N`` trajectories from the GP model, all stepped in parallel.

    Costs and safety losses come from the environment's functions evaluated
    on model states. A trajectory whose state leaves ``DIVERGENCE_BOUND`` is
    truncated after the offending step and flagged ``diverged``.
    """
    source = zeta_source or _ZetaSource(model, metric, rng=rng)
    states = env.reset(rng, N)
    alive = np.ones(N, dtype=bool)
    length = np.full(N, max_len)
    diverged = np.zeros(N, dtype=bool)
    S = np.zeros((max_len + 1, N, env.state_dim))
    U = np.zeros((max_len, N, env.action_dim))
    R = np.zeros_like(U)
    LP = np.zeros((max_len, N))
    C = np.zeros((max_len, N))
    Z = np.zeros((max_len, N))
    S[0] = states
    for t in range(max_len):
        obs = env.observe(states)
        raw, logp = bundle.policy.sample(obs, rng)
        act = np.clip(raw, -bundle.action_bound, bundle.action_bound)
        feats = env.features(states, act)
        mean, var, zeta = source(feats)
        eps = rng.standard_normal(mean.shape)
        delta = model.data.denormalize_targets(mean + np.sqrt(var) * eps)
        nxt = env.apply_delta(states, delta)
        U[t], R[t], LP[t], Z[t] = act, raw, logp, zeta
        C[t] = env.cost(states, act)
        S[t + 1] = nxt
        blown = alive & ~np.all(np.abs(nxt) <= DIVERGENCE_BOUND, axis=1)
        diverged |= blown
        length[blown] = t + 1
        alive &= ~blown
        if not alive.any():
            break
        states = np.where(alive[:, None], nxt, states)
    trajs = []
    for i in range(N):
        T = int(length[i])
        st = S[: T + 1, i]
        visited = st[:-1]
        trajs.append(Trajectory(
            states=st, actions=U[:T, i], costs=C[:T, i],
            safety_losses=np.asarray(env.safety_loss(visited), dtype=float),
            violations=np.asarray(env.is_violation(visited), dtype=bool),
            zeta=Z[:T, i], log_probs=LP[:T, i], raw_actions=R[:T, i], diverged=bool(diverged[i]),
        ))
    return trajs


# ---------------------------------------------------------------------------
# one control iteration


def build_batch(trajs, env: SafeEnv, bundle: PolicyBundle, gamma: float, lam: float):
    """Advantages, critic targets and discounted safety losses for a model batch."""
    obs, raw, logp, adv_c, adv_z, ret_c, ret_z, tid = [], [], [], [], [], [], [], []
    losses = []
    for i, tr in enumerate(trajs):
        o = env.observe(tr.states[:-1])
        vc = bundle.cost_critic.value(o)
        vz = bundle.zeta_critic.value(o)
        adv_c.append(gae(tr.costs, vc, gamma, lam))
        adv_z.append(gae(tr.zeta, vz, gamma, lam))
        ret_c.append(mc_returns(tr.costs, gamma))
        ret_z.append(mc_returns(tr.zeta, gamma))
        obs.append(o)
        raw.append(tr.raw_actions)
        logp.append(tr.log_probs)
        tid.append(np.full(len(tr), i))
        losses.append(tr.discounted_safety_loss(gamma))
    batch = RolloutBatch(
        obs=np.vstack(obs), raw_actions=np.vstack(raw), old_logp=np.concatenate(logp),
        adv_cost=normalize_advantages(np.concatenate(adv_c)),
        adv_zeta=normalize_advantages(np.concatenate(adv_z)),
        traj_id=np.concatenate(tid), losses=np.array(losses),
    )
    return batch, np.concatenate(ret_c), np.concatenate(ret_z)


def control_step(cfg: RunConfig, env: SafeEnv, bundle: PolicyBundle, state: SolverState, trajs,
                 rng: np.random.Generator) -> dict:
    a = cfg.agent
    batch, ret_c, ret_z = build_batch(trajs, env, bundle, a.gamma, a.gae_lambda)
    g_cost, g_zeta = objective_gradients(bundle.policy, batch)
    if a.use_exploration:
        lam, stationary = min_norm_lambda(g_cost, g_zeta)
    else:
        lam, stationary = 1.0, False
    state.lambda_pi, state.stationary = lam, stationary

    closs = fit_critic(bundle.cost_critic, batch.obs, ret_c, bundle.cost_opt, a.value_epochs,
                       a.minibatch_size, rng, a.max_grad_norm)
    zloss = fit_critic(bundle.zeta_critic, batch.obs, ret_z, bundle.zeta_opt, a.value_epochs,
                       a.minibatch_size, rng, a.max_grad_norm)

    cvar, nu = cvar_empirical(batch.losses, a.alpha)
    state.cvar, state.nu = cvar, nu
    if a.use_cvar:
        update_lambda_cvar(state, cvar, a.xi, a.penalty_lr)
    else:
        state.lambda_cvar = 0.0

    ucfg = UpdateConfig(a.clip_eps, a.update_epochs, a.policy_lr, a.max_grad_norm, a.minibatch_size,
                        "adam", a.clip_cvar, a.target_kl)
    info = policy_update(bundle.policy, batch, lam, state.lambda_cvar, nu, a.alpha, ucfg,
                         bundle.policy_opt, rng)
    state.n_updates += 1
    state.nan_flag |= info.nan_flag
    return {
        "lambda_pi": lam, "lambda_cvar": state.lambda_cvar, "nu": nu, "cvar": cvar,
        "mean_cost_return": float(np.mean([t.discounted_cost(a.gamma) for t in trajs])),
        "mean_zeta_return": float(np.mean([np.sum(a.gamma ** np.arange(len(t)) * t.zeta) for t in trajs])),
        "g_cost_norm": float(np.linalg.norm(g_cost)), "g_zeta_norm": float(np.linalg.norm(g_zeta)),
        "policy_grad_norm": info.grad_norms[0] if info.grad_norms else 0.0,
        "cost_critic_loss": closs[0], "zeta_critic_loss": zloss[0], "approx_kl": info.approx_kl,
        "diverged": int(sum(t.diverged for t in trajs)), "stationary": int(stationary),
        "nan_flag": int(info.nan_flag),
    }


# ---------------------------------------------------------------------------
# training


def fit_dynamics(cfg: RunConfig, dataset: TransitionDataset, init, rng) -> tuple[GPModel, FitResult]:
    """Fit the GP, retrying from default hyperparameters if the warm start fails."""
    d = cfg.dynamics_model
    bounds = HyperBounds(log_lengthscale=(HyperBounds.log_lengthscale[0], math.log(d.max_lengthscale)))
    last = None
    for attempt_init in ((init, None) if init is not None else (None,)):
        res = FitResult()
        try:
            model = fit(dataset, d.opt_iters, d.lr, tol=d.tol, init=attempt_init, optimizer=d.optimizer,
                        max_points=d.max_fit_points, rng=rng, result=res, cold_restart=d.cold_restart,
                        bounds=bounds)
            return model, res
        except (ModelFitError, np.linalg.LinAlgError) as exc:
            last = exc
    raise ModelFitError(f"GP fit failed: {last}")


def _seed_streams(seed: int):
    names = ("init", "real", "model", "update", "fit")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def train(cfg: RunConfig, out_dir=None, verbose: bool = False,
          env: SafeEnv | None = None) -> tuple[PolicyBundle, RunLog]:
    """Run the full loop; writes logs and checkpoints under ``out_dir`` if given.

    ``env`` overrides the environment built from ``cfg.env``.
    """
    cfg.validate()
    limits = threadpool_limits(1) if cfg.runner.deterministic else contextlib.nullcontext()
    with limits:
        return _train(cfg, out_dir, verbose, env or cfg.make_env())


def _train(cfg: RunConfig, out_dir, verbose, env: SafeEnv):
    r, a = cfg.runner, cfg.agent
    rngs = _seed_streams(r.seed)
    bundle = PolicyBundle.create(
        len(env.observe(np.zeros(env.state_dim))), env.action_dim, env.action_bound, rngs["init"],
        tuple(a.hidden), env.name, a.policy_lr, a.value_lr, a.init_log_std,
    )
    state = SolverState(lambda_cvar=a.lambda_cvar_init)
    log = RunLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config_effective.yaml")

    dataset = None
    hyper = None
    real_trajs: list[Trajectory] = []
    cumulative = 0
    for j in range(r.env_iterations):
        trajs, dataset = collect_real(env, bundle, r.real_batch, r.max_len, rngs["real"], dataset)
        real_trajs += trajs
        n_new = sum(len(t) for t in trajs)
        cumulative += n_new
        try:
            model, res = fit_dynamics(cfg, dataset, hyper if cfg.dynamics_model.warm_start else None, rngs["fit"])
        except ModelFitError as exc:
            log.aborted = str(exc)
            if out is not None:
                log.write(out)
            raise
        hyper = model.hyperparams
        log.env_rows.append({
            "iteration": j, "real_samples": n_new, "cumulative_samples": cumulative,
            "dataset_size": len(dataset), "real_tc": float(sum(t.total_safety_cost for t in trajs)),
            "real_tv": int(sum(t.total_violations for t in trajs)),
            "real_cost_return": float(np.mean([t.discounted_cost(a.gamma) for t in trajs])),
            "fit_mll": float(sum(tr[-1] for tr in res.mll_trace)), "fit_iters": int(sum(res.n_iter)),
        })
        if r.control_iterations > 0 and not state.nan_flag:
            source = _ZetaSource(model, cfg.metrics.name, cfg.metrics.n_partitions, rngs["model"],
                                 cfg.metrics.loo_subsample)
            for k in range(r.control_iterations):
                mtrajs = collect_model(model, env, bundle, r.model_batch, r.max_len, rngs["model"], source)
                row = control_step(cfg, env, bundle, state, mtrajs, rngs["update"])
                log.control_rows.append({"iteration": j, "control": k, **row})
                if state.nan_flag:
                    log.nan_flag = True
                    break
        if out is not None:
            pol = out / "checkpoints" / f"policy_{j:03d}.npz"
            mod = out / "checkpoints" / f"model_{j:03d}.npz"
            bundle.save(pol, iteration=j, lambda_cvar=state.lambda_cvar)
            save_model(mod, model, iteration=j, env_name=env.name)
            log.checkpoints += [str(pol), str(mod)]
            log.write(out)
        if verbose:
            row = log.control_rows[-1] if log.control_rows else {}
            print(f"[{j:03d}] samples={cumulative} tc={log.env_rows[-1]['real_tc']:.4f} "
                  f"lam_pi={row.get('lambda_pi', math.nan):.3f} lam_cvar={state.lambda_cvar:.3f} "
                  f"cvar={row.get('cvar', math.nan):.4f}", flush=True)
    if out is not None:
        bundle.save(out / "policy.npz", iteration=r.env_iterations, lambda_cvar=state.lambda_cvar)
        save_model(out / "model.npz", model, iteration=r.env_iterations, env_name=env.name)
        write_trajectories_csv(out / "real_trajectories.csv", real_trajs, env)
    return bundle, log
