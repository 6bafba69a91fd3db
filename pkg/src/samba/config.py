"""Run configuration: nested dataclasses with a strict YAML round trip."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .envs import (
    CartPoleDoubleParams, PendulumParams, SafeEnv, SafetySpec, default_safety_scale, make_env,
)


@dataclass
class EnvConfig:
    name: str = "safe_pendulum"
    usr_min: float = 20.0 * math.pi / 180.0
    usr_max: float = 30.0 * math.pi / 180.0
    hazard_margin: float = math.pi / 4.0
    safety_scale: float | None = None  # None: 1 / sum_{t<max_len} gamma^t
    terminate: bool = True
    params: dict = field(default_factory=dict)


@dataclass
class DynamicsConfig:
    opt_iters: int = 300
    lr: float = 0.1
    optimizer: str = "lbfgs"
    tol: float = 1e-5
    max_fit_points: int | None = 300
    warm_start: bool = True
    cold_restart: bool = True
    normalize: bool = True
    max_lengthscale: float = 3.0


@dataclass
class MetricsConfig:
    name: str = "loo"
    n_partitions: int = 8
    loo_subsample: int | None = None


@dataclass
class AgentConfig:
    hidden: list = field(default_factory=lambda: [32, 32])
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    penalty_lr: float = 5e-2
    clip_eps: float | None = 0.2
    update_epochs: int = 80
    value_epochs: int = 80
    minibatch_size: int | None = None
    max_grad_norm: float | None = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.97
    alpha: float = 0.9
    xi: float = 0.025
    lambda_cvar_init: float = 20.0
    init_log_std: float = math.log(0.5)
    clip_cvar: bool = True
    target_kl: float | None = None
    use_cvar: bool = True
    use_exploration: bool = True


@dataclass
class RunnerConfig:
    env_iterations: int = 50        # J
    control_iterations: int = 5     # K
    real_batch: int = 1             # B
    model_batch: int = 50           # N
    max_len: int = 30
    seed: int = 0
    deterministic: bool = True


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    dynamics_model: DynamicsConfig = field(default_factory=DynamicsConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    runner: RunnerConfig = field(default_factory=RunnerConfig)

    def validate(self) -> "RunConfig":
        r, a = self.runner, self.agent
        if r.env_iterations < 1 or r.real_batch < 1 or r.model_batch < 1 or r.max_len < 1:
            raise ValueError("J, B, N and max_len must be at least 1")
        if r.control_iterations < 0:
            raise ValueError("K must be non-negative")
        if not 0.0 <= a.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= a.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not 0.0 < a.alpha < 1.0 or a.xi <= 0:
            raise ValueError("alpha must lie in (0, 1) and xi must be positive")
        if a.lambda_cvar_init < 0:
            raise ValueError("lambda_cvar_init must be non-negative")
        if self.dynamics_model.max_lengthscale <= 1e-3:
            raise ValueError("max_lengthscale must exceed the lower lengthscale bound 1e-3")
        if self.metrics.name not in ("loo", "bootstrap", "entropy"):
            raise ValueError(f"unknown metric {self.metrics.name!r}")
        return self

    def ablation(self) -> "RunConfig":
        """Copy with the CVaR penalty and the exploration objective switched off."""
        cfg = from_dict(to_dict(self))
        cfg.agent.use_cvar = False
        cfg.agent.use_exploration = False
        cfg.agent.lambda_cvar_init = 0.0
        return cfg

    def make_env(self) -> SafeEnv:
        return build_env(self.env, self.agent.gamma, self.runner.max_len)


def build_env(ec: EnvConfig, gamma: float = 0.99, max_len: int = 30) -> SafeEnv:
    scale = ec.safety_scale if ec.safety_scale is not None else default_safety_scale(gamma, max_len)
    spec = SafetySpec(ec.usr_min, ec.usr_max, ec.hazard_margin, scale)
    params_cls = {"safe_pendulum": PendulumParams, "safe_cartpole_double": CartPoleDoubleParams}.get(ec.name)
    if params_cls is None:
        return make_env(ec.name)  # raises with the list of known names
    return make_env(ec.name, spec=spec, params=params_cls(**ec.params), terminate=ec.terminate)


def default_config(env_name: str = "safe_pendulum") -> RunConfig:
    cfg = RunConfig()
    cfg.env.name = env_name
    if env_name == "safe_cartpole_double":
        cfg.agent.gamma = 0.95
        cfg.env.terminate = False
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys in {path or '<root>'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}".lstrip(".")) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    (RunConfig, "env"): EnvConfig,
    (RunConfig, "dynamics_model"): DynamicsConfig,
    (RunConfig, "metrics"): MetricsConfig,
    (RunConfig, "agent"): AgentConfig,
    (RunConfig, "runner"): RunnerConfig,
}


def from_dict(data: dict) -> RunConfig:
    """Build a config; missing keys take defaults, unknown keys raise."""
    return _build(RunConfig, data or {}, "").validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
