"""Safety-augmented classic-control environments.

Two simulated systems are provided, a torque-limited pendulum and a cart
carrying a double pendulum. Both use the upright-zero angle convention and
monitor the (first) pole angle against an unsafe interval surrounded by a
wider hazard region in which a linear safety loss is paid.

All state functions accept arrays with arbitrary leading batch dimensions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Map angles onto [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi


def default_safety_scale(gamma: float = 0.99, horizon: int = 30) -> float:
    """Per-step scale making a trajectory pinned at the hazard centre total ~1."""
    return 1.0 / sum(gamma**t for t in range(horizon))


@dataclass(frozen=True)
class SafetySpec:
    """Unsafe interval, hazard margin and safety-loss scale (radians)."""

    usr_min: float = 20.0 * math.pi / 180.0
    usr_max: float = 30.0 * math.pi / 180.0
    hazard_margin: float = math.pi / 4.0
    scale: float = field(default_factory=default_safety_scale)

    def __post_init__(self):
        if not self.usr_min < self.usr_max:
            raise ValueError("usr_min must be smaller than usr_max")
        if self.hazard_margin <= 0 or self.scale <= 0:
            raise ValueError("hazard_margin and scale must be positive")

    @property
    def hz_min(self) -> float:
        return self.usr_min - self.hazard_margin

    @property
    def hz_max(self) -> float:
        return self.usr_max + self.hazard_margin

    @property
    def centre(self) -> float:
        return 0.5 * (self.hz_min + self.hz_max)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.hz_max - self.hz_min)


def safety_loss(theta, spec: SafetySpec):
    """Hinge-shaped loss, ``scale`` at the hazard centre and zero at its edges."""
    theta = np.asarray(theta, dtype=float)
    frac = 1.0 - np.abs(theta - spec.centre) / spec.half_width
    return spec.scale * np.maximum(frac, 0.0)


def is_violation(theta, spec: SafetySpec):
    """True inside the closed unsafe interval."""
    theta = np.asarray(theta, dtype=float)
    return (theta >= spec.usr_min) & (theta <= spec.usr_max)


def should_terminate(costs: Sequence[float], window: int = 5, threshold: float = 0.01) -> bool:
    """Stop once the last ``window`` costs are all at or below ``threshold``."""
    if len(costs) < window:
        return False
    return bool(np.all(np.asarray(costs[-window:], dtype=float) <= threshold))


# ---------------------------------------------------------------------------
# Pendulum


@dataclass(frozen=True)
class PendulumParams:
    g: float = 9.81
    m: float = 1.0
    l: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0


def pendulum_accel(theta, torque, p: PendulumParams = PendulumParams()):
    return 3.0 * p.g / (2.0 * p.l) * np.sin(theta) + 3.0 * torque / (p.m * p.l**2)


def pendulum_step(state, torque, p: PendulumParams = PendulumParams()):
    """Semi-implicit Euler step of the frictionless pendulum (theta=0 upright)."""
    state = np.asarray(state, dtype=float)
    u = np.clip(np.asarray(torque, dtype=float).reshape(state.shape[:-1]), -p.max_torque, p.max_torque)
    theta, theta_dot = state[..., 0], state[..., 1]
    new_dot = np.clip(theta_dot + pendulum_accel(theta, u, p) * p.dt, -p.max_speed, p.max_speed)
    new_theta = wrap_angle(theta + new_dot * p.dt)
    return np.stack([new_theta, new_dot], axis=-1)


def pendulum_energy(state, p: PendulumParams = PendulumParams()):
    """Energy per unit inertia of the uncontrolled pendulum."""
    state = np.asarray(state, dtype=float)
    return 0.5 * state[..., 1] ** 2 + 3.0 * p.g / (2.0 * p.l) * np.cos(state[..., 0])


def pendulum_cost(state, action, goal: float = 0.0):
    state = np.asarray(state, dtype=float)
    u = np.asarray(action, dtype=float).reshape(state.shape[:-1])
    err = wrap_angle(state[..., 0] - goal)
    return err**2 + 0.1 * state[..., 1] ** 2 + 0.001 * u**2


# ---------------------------------------------------------------------------
# Cart-pole double pendulum (point masses at the rod tips)


@dataclass(frozen=True)
class CartPoleDoubleParams:
    cart_mass: float = 0.5
    m1: float = 0.5
    m2: float = 0.5
    l1: float = 0.6
    l2: float = 0.6
    g: float = 9.81
    dt: float = 0.05
    max_force: float = 10.0
    action_cost: float = 1e-3
    substeps: int = 10


def cartpole_double_derivative(state, force, p: CartPoleDoubleParams = CartPoleDoubleParams()):
    """Time derivative of (x, x_dot, th1, th1_dot, th2, th2_dot)."""
    state = np.asarray(state, dtype=float)
    f = np.asarray(force, dtype=float).reshape(state.shape[:-1])
    _, xd, t1, t1d, t2, t2d = np.moveaxis(state, -1, 0)
    m12 = p.m1 + p.m2
    s1, c1, s2, c2 = np.sin(t1), np.cos(t1), np.sin(t2), np.cos(t2)
    s12, c12 = np.sin(t1 - t2), np.cos(t1 - t2)

    mass = np.empty(state.shape[:-1] + (3, 3))
    mass[..., 0, 0] = p.cart_mass + m12
    mass[..., 0, 1] = mass[..., 1, 0] = m12 * p.l1 * c1
    mass[..., 0, 2] = mass[..., 2, 0] = p.m2 * p.l2 * c2
    mass[..., 1, 1] = m12 * p.l1**2
    mass[..., 1, 2] = mass[..., 2, 1] = p.m2 * p.l1 * p.l2 * c12
    mass[..., 2, 2] = p.m2 * p.l2**2

    rhs = np.stack(
        [
            f + m12 * p.l1 * s1 * t1d**2 + p.m2 * p.l2 * s2 * t2d**2,
            m12 * p.g * p.l1 * s1 - p.m2 * p.l1 * p.l2 * s12 * t2d**2,
            p.m2 * p.g * p.l2 * s2 + p.m2 * p.l1 * p.l2 * s12 * t1d**2,
        ],
        axis=-1,
    )
    acc = np.linalg.solve(mass, rhs[..., None])[..., 0]
    return np.stack([xd, acc[..., 0], t1d, acc[..., 1], t2d, acc[..., 2]], axis=-1)


def rk4_step(deriv: Callable, state, dt: float):
    k1 = deriv(state)
    k2 = deriv(state + 0.5 * dt * k1)
    k3 = deriv(state + 0.5 * dt * k2)
    k4 = deriv(state + dt * k3)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def cartpole_double_step(state, force, p: CartPoleDoubleParams = CartPoleDoubleParams()):
    """Advance ``dt`` with ``substeps`` RK4 steps, force held constant; both angles wrapped."""
    state = np.asarray(state, dtype=float)
    f = np.clip(np.asarray(force, dtype=float).reshape(state.shape[:-1]), -p.max_force, p.max_force)
    h = p.dt / p.substeps
    out = state
    for _ in range(p.substeps):
        out = rk4_step(lambda s: cartpole_double_derivative(s, f, p), out, h)
    out = np.array(out, dtype=float)
    out[..., 2] = wrap_angle(out[..., 2])
    out[..., 4] = wrap_angle(out[..., 4])
    return out


def cartpole_double_energy(state, p: CartPoleDoubleParams = CartPoleDoubleParams()):
    state = np.asarray(state, dtype=float)
    _, xd, t1, t1d, t2, t2d = np.moveaxis(state, -1, 0)
    v1x = xd + p.l1 * np.cos(t1) * t1d
    v1y = -p.l1 * np.sin(t1) * t1d
    v2x = v1x + p.l2 * np.cos(t2) * t2d
    v2y = v1y - p.l2 * np.sin(t2) * t2d
    kinetic = 0.5 * p.cart_mass * xd**2 + 0.5 * p.m1 * (v1x**2 + v1y**2) + 0.5 * p.m2 * (v2x**2 + v2y**2)
    potential = p.g * (p.m1 * p.l1 * np.cos(t1) + p.m2 * (p.l1 * np.cos(t1) + p.l2 * np.cos(t2)))
    return kinetic + potential


def cartpole_double_cost(state, action, p: CartPoleDoubleParams = CartPoleDoubleParams()):
    """Squared distance of the outer tip from the upright target plus a small action penalty."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(action, dtype=float).reshape(state.shape[:-1])
    x, t1, t2 = state[..., 0], state[..., 2], state[..., 4]
    tip_x = x + p.l1 * np.sin(t1) + p.l2 * np.sin(t2)
    tip_y = p.l1 * np.cos(t1) + p.l2 * np.cos(t2)
    return tip_x**2 + (tip_y - (p.l1 + p.l2)) ** 2 + p.action_cost * u**2


# ---------------------------------------------------------------------------
# Environment objects


@dataclass
class StepRecord:
    state: np.ndarray
    action: np.ndarray
    cost: float
    safety_loss: float
    violation: bool
    next_state: np.ndarray


@dataclass
class Trajectory:
    """A real or model rollout.

    ``states`` has one more row than ``actions``; per-step arrays are indexed
    by the state they were evaluated on.
    """

    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    safety_losses: np.ndarray
    violations: np.ndarray
    zeta: np.ndarray | None = None
    log_probs: np.ndarray | None = None
    raw_actions: np.ndarray | None = None
    terminated: bool = False
    diverged: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_violations(self) -> int:
        return int(np.sum(self.violations))

    @property
    def total_safety_cost(self) -> float:
        return float(np.sum(self.safety_losses))

    def discounted_safety_loss(self, gamma: float) -> float:
        return float(np.sum(gamma ** np.arange(len(self)) * self.safety_losses))

    def discounted_cost(self, gamma: float) -> float:
        return float(np.sum(gamma ** np.arange(len(self)) * self.costs))

    def records(self) -> list[StepRecord]:
        return [
            StepRecord(
                self.states[t], self.actions[t], float(self.costs[t]),
                float(self.safety_losses[t]), bool(self.violations[t]), self.states[t + 1],
            )
            for t in range(len(self))
        ]


class SafeEnv:
    """Common interface; subclasses set the dynamics and encodings."""

    name: str
    state_dim: int
    action_dim: int = 1
    angle_dims: tuple[int, ...] = ()
    monitored_dim: int = 0

    def __init__(self, spec: SafetySpec | None = None, terminate: bool = False):
        self.spec = spec or SafetySpec()
        self.terminate = terminate

    # dynamics -----------------------------------------------------------
    @property
    def action_bound(self) -> float:
        raise NotImplementedError

    def step(self, state, action):
        raise NotImplementedError

    def cost(self, state, action):
        raise NotImplementedError

    def reset(self, rng: np.random.Generator, size: int | None = None):
        raise NotImplementedError

    # safety ----------------------------------------------------------------
    def monitored_angle(self, state):
        return np.asarray(state, dtype=float)[..., self.monitored_dim]

    def safety_loss(self, state):
        return safety_loss(self.monitored_angle(state), self.spec)

    def is_violation(self, state):
        return is_violation(self.monitored_angle(state), self.spec)

    # encodings ------------------------------------------------------------
    def observe(self, state):
        """Policy/critic input."""
        raise NotImplementedError

    def features(self, state, action):
        """Dynamics-model input: observation with raw angles embedded, plus action."""
        state = np.asarray(state, dtype=float)
        action = np.asarray(action, dtype=float).reshape(state.shape[:-1] + (self.action_dim,))
        cols = []
        for d in range(self.state_dim):
            if d in self.angle_dims:
                cols += [np.cos(state[..., d]), np.sin(state[..., d])]
            else:
                cols.append(state[..., d])
        return np.concatenate([np.stack(cols, axis=-1), action], axis=-1)

    @property
    def feature_dim(self) -> int:
        return self.state_dim + len(self.angle_dims) + self.action_dim

    def state_delta(self, state, next_state):
        delta = np.asarray(next_state, dtype=float) - np.asarray(state, dtype=float)
        for d in self.angle_dims:
            delta[..., d] = wrap_angle(delta[..., d])
        return delta

    def apply_delta(self, state, delta):
        out = np.asarray(state, dtype=float) + np.asarray(delta, dtype=float)
        for d in self.angle_dims:
            out[..., d] = wrap_angle(out[..., d])
        return out

    def clip_action(self, action):
        return np.clip(action, -self.action_bound, self.action_bound)

    # rollouts ---------------------------------------------------------------
    def rollout(self, policy: Callable, rng: np.random.Generator, max_len: int,
                initial_state=None, terminate: bool | None = None) -> Trajectory:
        """Roll ``policy(state) -> (action, raw_action, log_prob)`` in the real system."""
        terminate = self.terminate if terminate is None else terminate
        state = self.reset(rng) if initial_state is None else np.asarray(initial_state, dtype=float)
        states, actions, raws, logps, costs = [state], [], [], [], []
        stopped = False
        for _ in range(max_len):
            action, raw, logp = policy(state)
            action = self.clip_action(np.asarray(action, dtype=float).reshape(self.action_dim))
            costs.append(float(self.cost(state, action)))
            actions.append(action)
            raws.append(np.asarray(raw, dtype=float).reshape(self.action_dim))
            logps.append(float(logp))
            state = self.step(state, action)
            states.append(state)
            if terminate and should_terminate(costs):
                stopped = True
                break
        states = np.array(states)
        visited = states[:-1]
        return Trajectory(
            states=states,
            actions=np.array(actions).reshape(-1, self.action_dim),
            costs=np.array(costs),
            safety_losses=np.asarray(self.safety_loss(visited), dtype=float),
            violations=np.asarray(self.is_violation(visited), dtype=bool),
            log_probs=np.array(logps),
            raw_actions=np.array(raws).reshape(-1, self.action_dim),
            terminated=stopped,
        )


class SafePendulum(SafeEnv):
    name = "safe_pendulum"
    state_dim = 2
    angle_dims = (0,)

    def __init__(self, spec: SafetySpec | None = None, params: PendulumParams | None = None,
                 goal: float = 0.0, terminate: bool = True, init_speed: float = 1.0):
        super().__init__(spec, terminate)
        self.params = params or PendulumParams()
        self.goal = goal
        self.init_speed = init_speed

    @property
    def action_bound(self) -> float:
        return self.params.max_torque

    def step(self, state, action):
        return pendulum_step(state, action, self.params)

    def cost(self, state, action):
        return pendulum_cost(state, action, self.goal)

    def reset(self, rng, size=None):
        # angle uniform over the arc outside the hazard region
        arc = TWO_PI - (self.spec.hz_max - self.spec.hz_min)
        shape = () if size is None else (size,)
        theta = wrap_angle(self.spec.hz_max + 1e-6 + rng.uniform(0.0, arc - 2e-6, size=shape))
        theta_dot = rng.uniform(-self.init_speed, self.init_speed, size=shape)
        return np.stack([theta, theta_dot], axis=-1)

    def observe(self, state):
        state = np.asarray(state, dtype=float)
        return np.stack(
            [np.cos(state[..., 0]), np.sin(state[..., 0]), state[..., 1] / self.params.max_speed],
            axis=-1,
        )


class SafeCartPoleDoublePendulum(SafeEnv):
    name = "safe_cartpole_double"
    state_dim = 6
    angle_dims = (2, 4)
    monitored_dim = 2

    def __init__(self, spec: SafetySpec | None = None, params: CartPoleDoubleParams | None = None,
                 terminate: bool = False, init_noise: float = 0.1):
        super().__init__(spec, terminate)
        self.params = params or CartPoleDoubleParams()
        self.init_noise = init_noise

    @property
    def action_bound(self) -> float:
        return self.params.max_force

    def step(self, state, action):
        return cartpole_double_step(state, action, self.params)

    def cost(self, state, action):
        return cartpole_double_cost(state, action, self.params)

    def reset(self, rng, size=None):
        shape = () if size is None else (size,)
        mean = np.array([0.0, 0.0, math.pi, 0.0, math.pi, 0.0])
        state = mean + self.init_noise * rng.standard_normal(shape + (6,))
        state[..., 2] = wrap_angle(state[..., 2])
        state[..., 4] = wrap_angle(state[..., 4])
        return state

    def observe(self, state):
        state = np.asarray(state, dtype=float)
        return np.stack(
            [
                state[..., 0], state[..., 1] / 5.0,
                np.cos(state[..., 2]), np.sin(state[..., 2]), state[..., 3] / 10.0,
                np.cos(state[..., 4]), np.sin(state[..., 4]), state[..., 5] / 10.0,
            ],
            axis=-1,
        )


ENVIRONMENTS = {
    SafePendulum.name: SafePendulum,
    SafeCartPoleDoublePendulum.name: SafeCartPoleDoublePendulum,
}


def make_env(name: str, **kwargs) -> SafeEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)


def write_trajectories_csv(path, trajectories: Sequence[Trajectory], env: SafeEnv) -> None:
    """One row per step: t, state..., action..., cost, safety_loss, violation."""
    state_cols = [f"s{d}" for d in range(env.state_dim)]
    action_cols = [f"a{d}" for d in range(env.action_dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "t", *state_cols, *action_cols, "cost", "safety_loss", "violation"])
        for k, traj in enumerate(trajectories):
            for t in range(len(traj)):
                writer.writerow(
                    [k, t, *(repr(float(v)) for v in traj.states[t]),
                     *(repr(float(v)) for v in traj.actions[t]),
                     repr(float(traj.costs[t])), repr(float(traj.safety_losses[t])),
                     int(traj.violations[t])]
                )


def read_trajectories_csv(path) -> dict[int, dict[str, np.ndarray]]:
    """Parse a trajectory log back into per-trajectory column arrays."""
    out: dict[int, dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = out.setdefault(int(row["trajectory"]), {})
            for key, val in row.items():
                if key == "trajectory":
                    continue
                rec.setdefault(key, []).append(float(val))
    return {k: {c: np.array(v) for c, v in cols.items()} for k, cols in out.items()}
