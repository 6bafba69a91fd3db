"""Gaussian MLP policy and value critics with hand-written backprop.

Parameters live in flat float64 vectors so that gradients, optimizers and
checkpoints can treat every network the same way. Layers compute
``h = x @ W + b`` with ``W`` of shape (fan_in, fan_out).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# MLP


def orthogonal(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class MLP:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_gain: float = 1.0,
                 hidden_gain: float = math.sqrt(2.0)):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        rng = rng or np.random.default_rng()
        parts = []
        for li, shape in enumerate(self.shapes):
            gain = out_gain if li == len(self.shapes) - 1 else hidden_gain
            parts += [orthogonal(shape, gain, rng).ravel(), np.zeros(shape[1])]
        self.init_params = np.concatenate(parts)

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.shapes)

    def unpack(self, params):
        out, i = [], 0
        for a, b in self.shapes:
            W = params[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((W, params[i:i + b]))
            i += b
        return out

    def forward(self, params, X):
        """Return outputs (batch, d_out) and the activations needed by ``backward``."""
        h = np.atleast_2d(np.asarray(X, dtype=float))
        acts = [h]
        layers = self.unpack(params)
        for li, (W, b) in enumerate(layers):
            h = h @ W + b
            if li < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, params, acts, dout) -> np.ndarray:
        """Gradient of ``sum(dout * output)`` with respect to the flat parameters."""
        layers = self.unpack(params)
        grads = []
        delta = np.asarray(dout, dtype=float)
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            grads.append((delta.sum(axis=0), acts[li].T @ delta))
            if li > 0:
                delta = (delta @ W.T) * (1.0 - acts[li] ** 2)
        flat = []
        for gb, gW in reversed(grads):
            flat += [gW.ravel(), gb]
        return np.concatenate(flat)


# ---------------------------------------------------------------------------
# policy


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std.

    The flat parameter vector is ``[mlp params, log_std]``.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden=(32, 32), rng: np.random.Generator | None = None,
                 init_log_std: float = math.log(0.5)):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.mlp = MLP((obs_dim, *hidden, act_dim), rng, out_gain=0.01)
        self.params = np.concatenate([self.mlp.init_params, np.full(act_dim, init_log_std)])

    @property
    def n_params(self) -> int:
        return self.mlp.n_params + self.act_dim

    def split(self, params=None):
        params = self.params if params is None else params
        return params[: self.mlp.n_params], params[self.mlp.n_params:]

    def log_std(self, params=None) -> np.ndarray:
        return np.clip(self.split(params)[1], LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs, params=None) -> np.ndarray:
        w, _ = self.split(params)
        return self.mlp.forward(w, obs)[0]

    def sample(self, obs, rng: np.random.Generator, params=None):
        """Draw actions; returns (actions, log_probs) for a batch of observations."""
        mu = self.mean(obs, params)
        std = np.exp(self.log_std(params))
        u = mu + std * rng.standard_normal(mu.shape)
        return u, self._log_prob(u, mu, self.log_std(params))

    @staticmethod
    def _log_prob(u, mu, log_std):
        z = (u - mu) / np.exp(log_std)
        return np.sum(-0.5 * z**2 - log_std - HALF_LOG_2PI, axis=-1)

    def log_prob(self, obs, actions, params=None) -> np.ndarray:
        mu = self.mean(obs, params)
        return self._log_prob(np.asarray(actions, dtype=float).reshape(mu.shape), mu, self.log_std(params))

    def log_prob_grad(self, obs, actions, weights=None, params=None) -> np.ndarray:
        """``sum_i w_i grad log pi(u_i | x_i)`` with respect to the flat parameters.

        With ``weights=None`` every sample has weight one.
        """
        params = self.params if params is None else params
        w_mlp, raw_log_std = self.split(params)
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        mu, acts = self.mlp.forward(w_mlp, obs)
        u = np.asarray(actions, dtype=float).reshape(mu.shape)
        wts = np.ones(len(mu)) if weights is None else np.asarray(weights, dtype=float)
        var = np.exp(2 * log_std)
        d_mu = (u - mu) / var * wts[:, None]
        d_log_std = (((u - mu) ** 2 / var - 1.0) * wts[:, None]).sum(axis=0)
        d_log_std = np.where((raw_log_std < LOG_STD_MIN) | (raw_log_std > LOG_STD_MAX), 0.0, d_log_std)
        return np.concatenate([self.mlp.backward(w_mlp, acts, d_mu), d_log_std])

    def entropy(self, params=None) -> float:
        return float(np.sum(self.log_std(params) + HALF_LOG_2PI + 0.5))


# ---------------------------------------------------------------------------
# critics


class Critic:
    """Scalar state-value network."""

    def __init__(self, obs_dim: int, hidden=(32, 32), rng: np.random.Generator | None = None):
        self.obs_dim = obs_dim
        self.mlp = MLP((obs_dim, *hidden, 1), rng, out_gain=1.0)
        self.params = self.mlp.init_params.copy()

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def value(self, obs, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return self.mlp.forward(params, obs)[0][:, 0]

    def loss_and_grad(self, obs, targets, params=None):
        """Mean of ``0.5 (V(x) - R)^2`` and its gradient."""
        params = self.params if params is None else params
        out, acts = self.mlp.forward(params, obs)
        err = out[:, 0] - np.asarray(targets, dtype=float)
        n = len(err)
        grad = self.mlp.backward(params, acts, (err / n)[:, None])
        return float(0.5 * np.mean(err**2)), grad


def critic_update(critic: Critic, obs, targets, lr: float, optimizer: "Adam | None" = None,
                  max_grad_norm: float | None = None) -> float:
    """One step on the batch squared error; plain gradient descent unless an optimizer is given.

    Returns the loss before the step.
    """
    if len(targets) == 0:
        raise ValueError("critic batch is empty")
    loss, grad = critic.loss_and_grad(obs, targets)
    if max_grad_norm is not None:
        grad = clip_grad_norm(grad, max_grad_norm)
    if optimizer is None:
        critic.params = critic.params - lr * grad
    else:
        critic.params = optimizer.step(critic.params, grad)
    return loss


def fit_critic(critic: Critic, obs, targets, optimizer: "Adam", epochs: int, batch_size: int | None,
               rng: np.random.Generator, max_grad_norm: float | None = None) -> list[float]:
    """Several epochs of minibatch regression onto fixed targets."""
    obs = np.atleast_2d(obs)
    targets = np.asarray(targets, dtype=float)
    n = len(targets)
    bs = n if batch_size is None else min(batch_size, n)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            losses.append(critic_update(critic, obs[idx], targets[idx], optimizer.lr, optimizer, max_grad_norm))
    return losses


# ---------------------------------------------------------------------------
# optimisation helpers


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params, grad):
        """Return updated parameters for a descent step on ``grad``."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def restore(self, state: dict):
        self.m, self.v, self.t = state["m"], state["v"], state["t"]


def clip_grad_norm(grad, max_norm: float):
    norm = float(np.linalg.norm(grad))
    if norm > max_norm and norm > 0:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# returns and advantages


def mc_returns(values, gamma: float) -> np.ndarray:
    """Discounted reward-to-go ``R_t = c_t + gamma R_{t+1}``."""
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    acc = 0.0
    for t in range(len(values) - 1, -1, -1):
        acc = values[t] + gamma * acc
        out[t] = acc
    return out


def gae(values, baseline, gamma: float, lam: float, last_value: float = 0.0) -> np.ndarray:
    """Generalized advantage estimates from per-step signals and a value baseline.

    ``baseline`` holds ``V(x_t)`` for each step; the value after the final
    step is ``last_value`` (zero for a terminal bootstrap).
    """
    values = np.asarray(values, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    nxt = np.append(baseline[1:], last_value)
    deltas = values + gamma * nxt - baseline
    return mc_returns(deltas, gamma * lam)


def normalize_advantages(adv, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + eps)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class PolicyBundle:
    """Policy plus the cost and exploration critics, each with its own optimizer."""

    policy: GaussianPolicy
    cost_critic: Critic
    zeta_critic: Critic
    action_bound: float
    env_name: str = ""
    policy_opt: Adam = field(default_factory=lambda: Adam(3e-4))
    cost_opt: Adam = field(default_factory=lambda: Adam(1e-3))
    zeta_opt: Adam = field(default_factory=lambda: Adam(1e-3))

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, action_bound: float, rng: np.random.Generator,
               hidden=(32, 32), env_name: str = "", policy_lr: float = 3e-4, value_lr: float = 1e-3,
               init_log_std: float = math.log(0.5)) -> "PolicyBundle":
        return cls(
            GaussianPolicy(obs_dim, act_dim, hidden, rng, init_log_std),
            Critic(obs_dim, hidden, rng),
            Critic(obs_dim, hidden, rng),
            float(action_bound), env_name, Adam(policy_lr), Adam(value_lr), Adam(value_lr),
        )

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Return (clipped action, raw Gaussian sample, log-prob) for one observation."""
        obs = np.atleast_2d(obs)
        if deterministic or rng is None:
            raw = self.policy.mean(obs)
            logp = self.policy.log_prob(obs, raw)
        else:
            raw, logp = self.policy.sample(obs, rng)
        return np.clip(raw[0], -self.action_bound, self.action_bound), raw[0], float(logp[0])

    def save(self, path, **meta) -> None:
        arrays = {
            "version": np.array(CHECKPOINT_VERSION),
            "obs_dim": np.array(self.policy.obs_dim),
            "act_dim": np.array(self.policy.act_dim),
            "hidden": np.array(self.policy.mlp.sizes[1:-1]),
            "action_bound": np.array(self.action_bound),
            "env_name": np.array(self.env_name),
            "theta": self.policy.params,
            "phi_cost": self.cost_critic.params,
            "phi_zeta": self.zeta_critic.params,
        }
        for key, val in meta.items():
            arrays[f"meta_{key}"] = np.array(val)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple["PolicyBundle", dict]:
        with np.load(path, allow_pickle=False) as f:
            version = int(f["version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported policy checkpoint version {version}")
            hidden = tuple(int(h) for h in f["hidden"])
            obs_dim, act_dim = int(f["obs_dim"]), int(f["act_dim"])
            rng = np.random.default_rng(0)
            bundle = cls(
                GaussianPolicy(obs_dim, act_dim, hidden, rng), Critic(obs_dim, hidden, rng),
                Critic(obs_dim, hidden, rng), float(f["action_bound"]), str(f["env_name"]),
            )
            bundle.policy.params = f["theta"].copy()
            bundle.cost_critic.params = f["phi_cost"].copy()
            bundle.zeta_critic.params = f["phi_zeta"].copy()
            meta = {k[5:]: f[k].item() for k in f.files if k.startswith("meta_")}
        return bundle, meta
