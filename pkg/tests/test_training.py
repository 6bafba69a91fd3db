import copy

import numpy as np
import pytest

from conftest import LinearEnv
from samba import training
from samba.config import RunConfig, default_config
from samba.cvar import SolverState
from samba.envs import SafePendulum, is_violation, safety_loss
from samba.gp import GPModel, KernelHyperparams, ModelFitError, TransitionDataset, fit
from samba.policy import PolicyBundle
from samba.training import (
    CONTROL_FIELDS, ENV_FIELDS, collect_model, collect_real, control_step, read_rows, train, transitions,
)


def _bundle(env, seed=0, log_std=None):
    b = PolicyBundle.create(len(env.observe(np.zeros(env.state_dim))), env.action_dim, env.action_bound,
                            np.random.default_rng(seed), hidden=(8,), env_name=env.name)
    if log_std is not None:
        b.policy.params[-env.action_dim:] = log_std
    return b


def _stub_cfg(J=2, K=1, N=4, max_len=6, seed=0):
    cfg = RunConfig()
    cfg.runner.env_iterations, cfg.runner.control_iterations = J, K
    cfg.runner.model_batch, cfg.runner.max_len, cfg.runner.seed = N, max_len, seed
    cfg.agent.hidden = [8]
    cfg.agent.update_epochs = cfg.agent.value_epochs = 3
    cfg.dynamics_model.opt_iters = 30
    return cfg


def _linear_data(env, rng, n=200):
    S = env.reset(rng, n) * 2
    U = rng.uniform(-1, 1, size=(n, 1))
    return TransitionDataset(env.features(S, U), env.state_delta(S, env.step(S, U)))


# ---------------------------------------------------------------------------
# real collection


def test_collect_real_single_row(rng):
    env = LinearEnv()
    trajs, data = collect_real(env, _bundle(env), 1, 1, rng)
    assert len(trajs) == 1 and len(trajs[0]) == 1
    assert len(data) == 1


def test_collect_real_concatenates(rng):
    env = SafePendulum()
    b = _bundle(env)
    _, data = collect_real(env, b, 2, 7, rng)
    n0 = len(data)
    trajs, data2 = collect_real(env, b, 3, 7, rng, data)
    assert len(data2) == n0 + sum(len(t) for t in trajs)
    X, Y = transitions(env, trajs)
    np.testing.assert_array_equal(data2.inputs[n0:], X)
    np.testing.assert_array_equal(data2.targets[n0:], Y)


def test_collect_real_accounting(rng):
    env = SafePendulum(terminate=False)
    trajs, _ = collect_real(env, _bundle(env, log_std=1.0), 5, 30, rng)
    for t in trajs:
        th = t.states[:-1, 0]
        assert t.total_violations == int(np.sum(is_violation(th, env.spec)))
        assert t.total_safety_cost == pytest.approx(float(np.sum(safety_loss(th, env.spec))))


# ---------------------------------------------------------------------------
# model collection


def test_collect_model_single_step(rng):
    env = LinearEnv()
    model = fit(_linear_data(env, rng, 20), opt_iters=20)
    trajs = collect_model(model, env, _bundle(env), 1, 1, rng)
    assert len(trajs) == 1 and len(trajs[0]) == 1
    assert trajs[0].zeta.shape == (1,) and trajs[0].states.shape == (2, 2)


def test_collect_model_matches_linear_system(rng):
    env = LinearEnv()
    model = fit(_linear_data(env, rng), opt_iters=200)
    b = _bundle(env, log_std=-20.0)  # deterministic actions
    trajs = collect_model(model, env, b, 10, 5, np.random.default_rng(4))
    for t in trajs:
        s = t.states[0]
        for k in range(5):
            s = env.step(s, t.actions[k])
            assert np.max(np.abs(t.states[k + 1] - s)) < 1e-2 * (k + 1)


def test_collect_model_deterministic(rng):
    env = LinearEnv()
    model = fit(_linear_data(env, rng, 40), opt_iters=20)
    b = _bundle(env)
    a = collect_model(model, env, b, 5, 4, np.random.default_rng(1))
    c = collect_model(model, env, b, 5, 4, np.random.default_rng(1))
    for x, y in zip(a, c):
        np.testing.assert_array_equal(x.states, y.states)
        np.testing.assert_array_equal(x.zeta, y.zeta)
        np.testing.assert_array_equal(x.log_probs, y.log_probs)


def test_collect_model_divergence_truncates(rng):
    env = LinearEnv()
    X = env.features(env.reset(rng, 10), np.zeros(10))
    Y = np.full((10, 2), 5e3)
    hp = [KernelHyperparams.from_values(np.full(3, 100.0), 1.0, 1e-4)] * 2
    model = GPModel(TransitionDataset(X, Y, normalize=True), hp).refactor()
    trajs = collect_model(model, env, _bundle(env), 3, 10, rng)
    for t in trajs:
        assert t.diverged and len(t) == 1


# ---------------------------------------------------------------------------
# control step


def test_control_step_ablation_keeps_multiplier_zero(rng):
    env = LinearEnv()
    cfg = _stub_cfg().ablation()
    model = fit(_linear_data(env, rng, 40), opt_iters=20)
    b = _bundle(env)
    state = SolverState(lambda_cvar=0.0)
    trajs = collect_model(model, env, b, 6, 5, rng)
    row = control_step(cfg, env, b, state, trajs, rng)
    assert row["lambda_pi"] == 1.0 and row["lambda_cvar"] == 0.0
    assert set(row) == set(CONTROL_FIELDS) - {"iteration", "control"}


def test_control_step_raises_multiplier_when_unsafe(rng):
    env = LinearEnv()
    cfg = _stub_cfg()
    cfg.agent.xi = 1e-6
    model = fit(_linear_data(env, rng, 40), opt_iters=20)
    b = _bundle(env)
    state = SolverState()
    trajs = collect_model(model, env, b, 6, 5, rng)
    trajs[0].safety_losses[:] = 1.0  # ensure a non-empty tail
    control_step(cfg, env, b, state, trajs, rng)
    assert state.lambda_cvar > 0.0


# ---------------------------------------------------------------------------
# full loop


def test_train_no_control_returns_initial_policy(tmp_path):
    cfg = _stub_cfg(J=1, K=0)
    env = LinearEnv()
    bundle, log = train(cfg, tmp_path, env=env)
    init = PolicyBundle.create(2, 1, 1.0, training._seed_streams(cfg.runner.seed)["init"], (8,))
    np.testing.assert_array_equal(bundle.policy.params, init.policy.params)
    assert len(log.env_rows) == 1 and log.control_rows == []


def test_train_smoke_invariants(tmp_path):
    cfg = _stub_cfg(J=3, K=2)
    bundle, log = train(cfg, tmp_path, env=LinearEnv())
    rows = log.env_rows
    assert len(rows) == 3 and len(log.control_rows) == 6
    cum = [r["cumulative_samples"] for r in rows]
    assert cum == list(np.cumsum([r["real_samples"] for r in rows]))
    assert all(r["dataset_size"] == c for r, c in zip(rows, cum))
    assert cum[-1] == 3 * cfg.runner.max_len  # no termination in the stub
    for r in log.control_rows:
        assert r["lambda_cvar"] >= 0 and 0 <= r["lambda_pi"] <= 1
        assert np.isfinite(r["nu"]) and np.isfinite(r["cvar"])
    for name in ("run_log.csv", "diagnostics.csv", "config_effective.yaml", "policy.npz", "model.npz",
                 "real_trajectories.csv"):
        assert (tmp_path / name).exists()
    assert len(list((tmp_path / "checkpoints").glob("policy_*.npz"))) == 3
    assert list(read_rows(tmp_path / "run_log.csv")[0]) == ENV_FIELDS
    assert len(read_rows(tmp_path / "diagnostics.csv")) == 6


def test_train_reproducible():
    cfg = _stub_cfg(J=2, K=1, seed=5)
    _, a = train(cfg, env=LinearEnv())
    _, b = train(copy.deepcopy(cfg), env=LinearEnv())
    assert a.scalar_streams() == b.scalar_streams()
    _, c = train(_stub_cfg(J=2, K=1, seed=6), env=LinearEnv())
    assert a.scalar_streams() != c.scalar_streams()


def test_train_fit_failure_persists_log(tmp_path, monkeypatch):
    calls = {"n": 0}
    real_fit = training.fit

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 1:
            raise ModelFitError("boom")
        return real_fit(*args, **kwargs)
    monkeypatch.setattr(training, "fit", flaky)
    with pytest.raises(ModelFitError):
        train(_stub_cfg(J=3, K=0), tmp_path, env=LinearEnv())
    assert len(read_rows(tmp_path / "run_log.csv")) == 1
    assert calls["n"] == 3  # warm start then default start on the failing iteration


def test_train_stops_updates_after_nan(monkeypatch):
    def poisoned(cfg, env, bundle, state, trajs, rng):
        state.nan_flag = True
        return {k: 0 for k in CONTROL_FIELDS if k not in ("iteration", "control")}
    monkeypatch.setattr(training, "control_step", poisoned)
    _, log = train(_stub_cfg(J=3, K=2), env=LinearEnv())
    assert log.nan_flag and len(log.control_rows) == 1


def test_pendulum_default_run_short():
    cfg = default_config()
    cfg.runner.env_iterations, cfg.runner.control_iterations, cfg.runner.model_batch = 2, 1, 5
    cfg.agent.update_epochs = cfg.agent.value_epochs = 2
    bundle, log = train(cfg)
    assert bundle.env_name == "safe_pendulum"
    assert log.cumulative_samples <= 2 * cfg.runner.max_len
