import math

import pytest

from samba.config import (
    RunConfig, default_config, dump_config, from_dict, load_config, to_dict,
)


def test_defaults():
    cfg = default_config()
    assert cfg.runner.env_iterations == 50 and cfg.runner.max_len == 30
    assert cfg.agent.alpha == 0.9 and cfg.agent.xi == 0.025
    assert cfg.agent.gamma == 0.99 and cfg.agent.gae_lambda == 0.97
    assert cfg.agent.clip_eps == 0.2 and cfg.agent.update_epochs == 80
    assert cfg.agent.max_grad_norm == 0.5 and cfg.agent.penalty_lr == 0.05
    assert cfg.agent.value_lr == 1e-3
    assert cfg.dynamics_model.opt_iters == 300 and cfg.dynamics_model.lr == 0.1
    assert cfg.metrics.n_partitions == 8
    assert cfg.env.usr_min == pytest.approx(math.radians(20))


def test_cartpole_defaults():
    cfg = default_config("safe_cartpole_double")
    assert cfg.agent.gamma == 0.95
    assert cfg.make_env().name == "safe_cartpole_double"


def test_yaml_roundtrip(tmp_path):
    cfg = default_config()
    cfg.runner.seed = 7
    cfg.agent.hidden = [16, 8]
    cfg.env.params = {"dt": 0.02}
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    assert to_dict(load_config(path)) == to_dict(cfg)


def test_partial_mapping_takes_defaults():
    cfg = from_dict({"runner": {"seed": 3}})
    assert cfg.runner.seed == 3
    assert cfg.runner.env_iterations == RunConfig().runner.env_iterations
    assert to_dict(from_dict({})) == to_dict(RunConfig())


@pytest.mark.parametrize("data", [
    {"runner": {"sed": 1}},
    {"unknown_section": {}},
    {"agent": {"alpha": 0.9, "lambda": 1}},
    {"runner": 5},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ValueError):
        from_dict(data)


@pytest.mark.parametrize("data", [
    {"runner": {"env_iterations": 0}},
    {"runner": {"control_iterations": -1}},
    {"agent": {"gamma": 1.0}},
    {"agent": {"alpha": 1.0}},
    {"agent": {"xi": 0.0}},
    {"metrics": {"name": "variance"}},
    {"agent": {"lambda_cvar_init": -1.0}},
    {"dynamics_model": {"max_lengthscale": 0.0}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ValueError):
        from_dict(data)


def test_ablation_switches_and_copies():
    cfg = default_config()
    abl = cfg.ablation()
    assert not abl.agent.use_cvar and not abl.agent.use_exploration
    assert abl.agent.lambda_cvar_init == 0.0
    assert cfg.agent.use_cvar and cfg.agent.use_exploration
    abl.runner.seed = 99
    assert cfg.runner.seed == 0


def test_env_built_from_config():
    cfg = default_config()
    cfg.env.usr_min, cfg.env.usr_max = 0.1, 0.2
    cfg.env.params = {"max_torque": 1.0}
    env = cfg.make_env()
    assert env.spec.usr_min == 0.1 and env.params.max_torque == 1.0
    with pytest.raises(TypeError):
        cfg.env.params = {"torque": 1.0}
        cfg.make_env()
