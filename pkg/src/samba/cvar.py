"""CVaR-constrained bi-objective policy optimisation.

The policy minimises ``lam * E[C] - (1 - lam) * E[zeta] + lam_cvar * CVaR``,
where ``lam`` is the min-norm weighting of the two descent directions and
``lam_cvar`` follows projected dual ascent on the CVaR constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import Adam, GaussianPolicy, clip_grad_norm


@dataclass(frozen=True)
class CvarConfig:
    alpha: float = 0.9
    xi: float = 0.025
    penalty_lr: float = 5e-2

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.penalty_lr < 0:
            raise ValueError("penalty_lr must be non-negative")


@dataclass
class SolverState:
    lambda_cvar: float = 0.0
    nu: float = 0.0
    cvar: float = 0.0
    lambda_pi: float = 1.0
    stationary: bool = False
    n_updates: int = 0
    nan_flag: bool = False

    def __post_init__(self):
        if self.lambda_cvar < 0:
            raise ValueError("lambda_cvar must be non-negative")


# ---------------------------------------------------------------------------
# CVaR


def cvar_empirical(losses, alpha: float) -> tuple[float, float]:
    """Empirical (CVaR, VaR) of a loss sample.

    VaR is the order statistic at ``ceil(alpha N)``, which minimises
    ``nu + mean((L - nu)^+) / (1 - alpha)`` exactly, and
    ``CVaR = VaR + mean((L - VaR)^+) / (1 - alpha)``.
    """
    losses = np.asarray(losses, dtype=float).ravel()
    if losses.size == 0:
        raise ValueError("cannot estimate CVaR from an empty batch")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    nu = float(np.quantile(losses, alpha, method="inverted_cdf")) if alpha > 0 else float(losses.min())
    return nu + float(np.mean(np.maximum(losses - nu, 0.0))) / (1.0 - alpha), nu


def cvar_weights(losses, nu: float, alpha: float) -> np.ndarray:
    """Per-trajectory likelihood-ratio weights ``1[L >= nu] (L - nu) / (N (1 - alpha))``."""
    losses = np.asarray(losses, dtype=float)
    w = np.where(losses >= nu, losses - nu, 0.0)
    return w / (len(losses) * (1.0 - alpha))


def cvar_gradient(losses, score_sums, nu: float, alpha: float) -> np.ndarray:
    """CVaR policy gradient from per-trajectory sums of score vectors (shape (N, P))."""
    return cvar_weights(losses, nu, alpha) @ np.atleast_2d(score_sums)


def update_lambda_cvar(state: SolverState, cvar_estimate: float, xi: float, penalty_lr: float) -> SolverState:
    if not np.isfinite(cvar_estimate):
        raise ValueError("CVaR estimate must be finite")
    state.lambda_cvar = max(0.0, state.lambda_cvar + penalty_lr * (cvar_estimate - xi))
    return state


# ---------------------------------------------------------------------------
# min-norm weighting


def min_norm_lambda(g_cost, g_zeta) -> tuple[float, bool]:
    """Weight of the cost direction in the min-norm convex combination.

    The two descent directions are ``g1 = g_cost`` and ``g2 = -g_zeta``.
    Returns ``(lam, stationary)``; ``stationary`` is set when both gradients
    vanish.
    """
    g1 = np.asarray(g_cost, dtype=float).ravel()
    g2 = -np.asarray(g_zeta, dtype=float).ravel()
    if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
        raise ValueError("gradients must be finite")
    if not np.any(g1) and not np.any(g2):
        return 1.0, True
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom == 0.0:
        return 1.0, False
    lam = float((g2 - g1) @ g2) / denom
    return min(1.0, max(0.0, lam)), False


# ---------------------------------------------------------------------------
# batches and the clipped update


@dataclass
class RolloutBatch:
    """Flattened model rollouts, one row per step."""

    obs: np.ndarray
    raw_actions: np.ndarray
    old_logp: np.ndarray
    adv_cost: np.ndarray
    adv_zeta: np.ndarray
    traj_id: np.ndarray
    losses: np.ndarray  # discounted safety loss per trajectory

    @property
    def n_traj(self) -> int:
        return len(self.losses)

    def __len__(self) -> int:
        return len(self.old_logp)


def objective_gradients(policy: GaussianPolicy, batch: RolloutBatch, params=None):
    """``(g_cost, g_zeta)``: score-function gradients of E[C] and E[zeta] at the current policy."""
    n = batch.n_traj
    g_cost = policy.log_prob_grad(batch.obs, batch.raw_actions, batch.adv_cost, params) / n
    g_zeta = policy.log_prob_grad(batch.obs, batch.raw_actions, batch.adv_zeta, params) / n
    return g_cost, g_zeta


def surrogate_gradient(policy: GaussianPolicy, params, batch: RolloutBatch, idx, lam: float, lam_cvar: float,
                       nu: float, alpha: float, clip_eps: float | None, clip_cvar: bool = True) -> np.ndarray:
    """Gradient of the clipped surrogate on rows ``idx`` (scaled to the full batch).

    The surrogate is ``(1/N) sum max(r A, clip(r) A) + lam_cvar sum r w`` with
    ``A = lam A_C - (1 - lam) A_zeta`` and ``w`` the CVaR tail weight of the
    step's trajectory. ``clip_eps=None`` disables clipping.
    """
    obs, raw = batch.obs[idx], batch.raw_actions[idx]
    logp = policy.log_prob(obs, raw, params)
    ratio = np.exp(logp - batch.old_logp[idx])
    adv = lam * batch.adv_cost[idx] - (1.0 - lam) * batch.adv_zeta[idx]
    scale = len(batch) / len(idx)
    coef = ratio * adv / batch.n_traj
    if clip_eps is not None:
        coef = np.where(_clip_active(ratio, adv, clip_eps), 0.0, coef)
    if lam_cvar > 0:
        w = cvar_weights(batch.losses, nu, alpha)[batch.traj_id[idx]]
        tail = lam_cvar * ratio * w
        if clip_eps is not None and clip_cvar:
            tail = np.where(_clip_active(ratio, w, clip_eps), 0.0, tail)
        coef = coef + tail
    # d ratio / d theta = ratio * grad log pi
    return scale * policy.log_prob_grad(obs, raw, coef, params)


def _clip_active(ratio, adv, eps):
    """True where ``max(r A, clip(r) A)`` takes the constant clipped branch."""
    return ((adv > 0) & (ratio < 1 - eps)) | ((adv < 0) & (ratio > 1 + eps))


@dataclass
class UpdateConfig:
    clip_eps: float | None = 0.2
    epochs: int = 80
    lr: float = 3e-4
    max_grad_norm: float | None = 0.5
    minibatch_size: int | None = None
    optimizer: str = "adam"
    clip_cvar: bool = True
    target_kl: float | None = None


@dataclass
class UpdateInfo:
    epochs_run: int = 0
    grad_norms: list[float] = field(default_factory=list)
    nan_flag: bool = False
    approx_kl: float = 0.0


def policy_update(policy: GaussianPolicy, batch: RolloutBatch, lam: float, lam_cvar: float, nu: float,
                  alpha: float, cfg: UpdateConfig = UpdateConfig(), optimizer: Adam | None = None,
                  rng: np.random.Generator | None = None) -> UpdateInfo:
    """Run the clipped-ratio update in place on ``policy.params``.

    A non-finite gradient restores the parameters and optimizer state from
    before the call and sets ``nan_flag``.
    """
    if cfg.optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.optimizer == "adam" and optimizer is None:
        optimizer = Adam(cfg.lr)
    saved = policy.params.copy()
    saved_opt = dict(optimizer.state()) if optimizer is not None else None
    info = UpdateInfo()
    n = len(batch)
    bs = n if cfg.minibatch_size is None else min(cfg.minibatch_size, n)
    rng = rng or np.random.default_rng(0)
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            grad = surrogate_gradient(policy, policy.params, batch, idx, lam, lam_cvar, nu, alpha,
                                      cfg.clip_eps, cfg.clip_cvar)
            if not np.all(np.isfinite(grad)):
                policy.params = saved
                if optimizer is not None:
                    optimizer.restore(saved_opt)
                info.nan_flag = True
                return info
            info.grad_norms.append(float(np.linalg.norm(grad)))
            if cfg.max_grad_norm is not None:
                grad = clip_grad_norm(grad, cfg.max_grad_norm)
            if cfg.optimizer == "adam":
                new = optimizer.step(policy.params, grad)
            else:
                new = policy.params - cfg.lr * grad
            if not np.all(np.isfinite(new)):
                policy.params = saved
                if optimizer is not None:
                    optimizer.restore(saved_opt)
                info.nan_flag = True
                return info
            policy.params = new
        info.epochs_run += 1
        info.approx_kl = float(np.mean(batch.old_logp - policy.log_prob(batch.obs, batch.raw_actions)))
        if cfg.target_kl is not None and info.approx_kl > 1.5 * cfg.target_kl:
            break
    return info
