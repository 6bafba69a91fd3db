"""Out-of-sample exploration metrics for a fitted GP dynamics model.

``zeta_loo`` is the expected KL divergence from the leave-one-out posterior
to the full posterior. It is computed for every left-out index at once with
the rank-one downdate of ``A = (K + noise I)^-1``::

    mu_i  = mu  - (k . a_i) (a_i . y) / a_ii
    var_i = var + (k . a_i)^2 / a_ii

so a sweep over all ``i`` costs one product ``A @ K(X, queries)``.
``zeta_bootstrap`` averages a symmetric KL between posteriors conditioned on
random halves of the data. ``entropy_baseline`` is the usual differential
entropy, for comparison.

All metrics work in the model's normalized target units and sum over the
independent output dimensions.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .gp import Factor, GPModel, ModelStateError, factorize, predict, rbf_gram

VAR_FLOOR = 1e-12
LOG_2PI_E = math.log(2.0 * math.pi * math.e)


class StaleWorkspaceError(RuntimeError):
    """The workspace was built from a different model or an older fit."""


# ---------------------------------------------------------------------------
# KL divergence


def kl_gaussian(p_mean, p_var, q_mean, q_var):
    """KL(p || q) between univariate Gaussians (broadcasts)."""
    p_var = np.asarray(p_var, dtype=float)
    q_var = np.asarray(q_var, dtype=float)
    if np.any(p_var <= 0) or np.any(q_var <= 0):
        raise ValueError("variances must be strictly positive")
    return _kl(np.asarray(p_mean, dtype=float), p_var, np.asarray(q_mean, dtype=float), q_var)


def _kl(pm, pv, qm, qv):
    ratio = pv / qv
    # ratio - 1 - log(ratio) computed as r - log1p(r) with r = ratio - 1
    r = ratio - 1.0
    return 0.5 * ((pm - qm) ** 2 / qv + r - np.log1p(r))


def _sym_kl(m1, v1, m2, v2):
    return 0.5 * (_kl(m1, v1, m2, v2) + _kl(m2, v2, m1, v1))


# ---------------------------------------------------------------------------
# leave-one-out


@dataclass(frozen=True)
class LooWorkspace:
    """Per-output Cholesky factor, ``A``, its diagonal and ``A y``, tied to one model fit."""

    chol: tuple[np.ndarray, ...]
    A: tuple[np.ndarray, ...]
    diag: tuple[np.ndarray, ...]
    alpha: tuple[np.ndarray, ...]
    model_token: tuple[int, int]

    @property
    def n_train(self) -> int:
        return len(self.diag[0]) if self.diag else 0


def build_workspace(model: GPModel) -> LooWorkspace:
    if not model.is_fitted:
        raise ModelStateError("model must be fitted before building a LOO workspace")
    diags = tuple(np.diag(f.A).copy() for f in model.factors)
    if any(np.any(d <= 0) for d in diags):
        raise ModelStateError("non-positive diagonal in A; factorization is unusable")
    return LooWorkspace(
        chol=tuple(f.chol for f in model.factors),
        A=tuple(f.A for f in model.factors),
        diag=diags,
        alpha=tuple(f.alpha for f in model.factors),
        model_token=(id(model), model.version),
    )


def _check_workspace(model: GPModel, ws: LooWorkspace):
    if ws.model_token != (id(model), model.version):
        raise StaleWorkspaceError("LOO workspace does not match the current model fit")


def _full_and_cross(model: GPModel, ws: LooWorkspace, Xq, k):
    """Full posterior at normalized queries plus ``V = A K(X, Xq)`` for output ``k``.

    Both go through the Cholesky factor: with a large signal variance and a
    tiny noise floor, ``sf2 - Kq^T A Kq`` from the explicit inverse loses
    every significant digit.
    """
    hp = model.hyperparams[k]
    Kq = rbf_gram(model.X, Xq, hp)
    L = ws.chol[k]
    W = solve_triangular(L, Kq, lower=True, check_finite=False)
    V = solve_triangular(L.T, W, lower=False, check_finite=False)
    mean = Kq.T @ ws.alpha[k]
    var = np.maximum(hp.signal_variance - np.sum(W * W, axis=0), VAR_FLOOR)
    return mean, var, V


def loo_posterior(model: GPModel, ws: LooWorkspace, query, i: int):
    """Posterior mean and variance at ``query`` with training row ``i`` removed.

    Returns two arrays of shape (n_queries, n_outputs).
    """
    _check_workspace(model, ws)
    n = model.n_train
    if not 0 <= i < n:
        raise IndexError(f"left-out index {i} outside [0, {n})")
    Xq = model.normalize_queries(query)
    means = np.empty((len(Xq), model.output_dim))
    variances = np.empty_like(means)
    for k in range(model.output_dim):
        mean, var, V = _full_and_cross(model, ws, Xq, k)
        a_ii = ws.diag[k][i]
        means[:, k] = mean - V[i] * ws.alpha[k][i] / a_ii
        variances[:, k] = var + V[i] ** 2 / a_ii
    return means, variances


def loo_kl_matrix(model: GPModel, ws: LooWorkspace, queries) -> np.ndarray:
    """KL(p(f*|D_-i) || p(f*|D)) summed over outputs, shape (n_train, n_queries)."""
    _check_workspace(model, ws)
    Xq = model.normalize_queries(queries)
    out = np.zeros((model.n_train, len(Xq)))
    for k in range(model.output_dim):
        _, var, V = _full_and_cross(model, ws, Xq, k)
        out += _loo_kl(V, ws.alpha[k], ws.diag[k], var)
    return out


def _loo_kl(V, alpha, diag, var):
    # mean shift (V_i alpha_i / a_ii), variance inflation r = V_i^2 / (a_ii var)
    shift = V * (alpha / diag)[:, None]
    r = V**2 / (diag[:, None] * var[None, :])
    return 0.5 * (shift**2 / var[None, :] + r - np.log1p(r))


def zeta_loo(model: GPModel, ws: LooWorkspace, queries, *, subsample: int | None = None,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Expected leave-one-out KL at each query (shape (n_queries,)).

    The expectation is exact over all training points unless ``subsample``
    asks for a uniform subset of left-out indices.
    """
    _check_workspace(model, ws)
    if model.n_train < 2:
        raise ModelStateError("zeta_loo needs at least two training points")
    Xq = model.normalize_queries(queries)
    idx = None
    if subsample is not None and subsample < model.n_train:
        rng = rng or np.random.default_rng()
        idx = rng.choice(model.n_train, size=subsample, replace=False)
    total = np.zeros(len(Xq))
    for k in range(model.output_dim):
        _, var, V = _full_and_cross(model, ws, Xq, k)
        if idx is not None:
            V, alpha, diag = V[idx], ws.alpha[k][idx], ws.diag[k][idx]
        else:
            alpha, diag = ws.alpha[k], ws.diag[k]
        total += _loo_kl(V, alpha, diag, var).mean(axis=0)
    return total


def predict_with_loo(model: GPModel, ws: LooWorkspace, queries):
    """Posterior mean/variance and zeta_loo from one shared cross-covariance product.

    Used by model rollouts, which need both at every step.
    """
    _check_workspace(model, ws)
    Xq = model.normalize_queries(queries)
    means = np.empty((len(Xq), model.output_dim))
    variances = np.empty_like(means)
    zeta = np.zeros(len(Xq))
    for k in range(model.output_dim):
        mean, var, V = _full_and_cross(model, ws, Xq, k)
        means[:, k] = mean
        variances[:, k] = var
        zeta += _loo_kl(V, ws.alpha[k], ws.diag[k], var).mean(axis=0)
    return means, variances, zeta


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapWorkspace:
    """Random bi-partitions and the factorizations of each half."""

    partitions: list[tuple[np.ndarray, np.ndarray]]
    factors: list[tuple[list[Factor | None], list[Factor | None]]]
    model_token: tuple[int, int]


def random_bipartitions(n: int, n_partitions: int, rng: np.random.Generator):
    """``n_partitions`` random splits into halves of sizes floor(n/2) and ceil(n/2)."""
    out = []
    for _ in range(n_partitions):
        perm = rng.permutation(n)
        out.append((np.sort(perm[: n // 2]), np.sort(perm[n // 2:])))
    return out


def build_bootstrap(model: GPModel, n_partitions: int = 8, rng: np.random.Generator | None = None,
                    partitions: Sequence[tuple[np.ndarray, np.ndarray]] | None = None) -> BootstrapWorkspace:
    if model.n_train < 2:
        raise ModelStateError("zeta_bootstrap needs at least two training points")
    if partitions is None:
        if n_partitions < 1:
            raise ValueError("n_partitions must be at least 1")
        partitions = random_bipartitions(model.n_train, n_partitions, rng or np.random.default_rng())
    partitions = [(np.asarray(a, dtype=int), np.asarray(b, dtype=int)) for a, b in partitions]
    factors = []
    for half1, half2 in partitions:
        pair = []
        for idx in (half1, half2):
            if len(idx) < 2:
                pair.append([None] * model.output_dim)
            else:
                pair.append([factorize(model.X[idx], model.Y[idx, k], hp)
                             for k, hp in enumerate(model.hyperparams)])
        factors.append(tuple(pair))
    return BootstrapWorkspace(partitions, factors, (id(model), model.version))


def _half_posterior(model, idx, fac: Factor | None, Xq, k):
    hp = model.hyperparams[k]
    if fac is None:
        return np.zeros(len(Xq)), np.full(len(Xq), hp.signal_variance)
    Kq = rbf_gram(model.X[idx], Xq, hp)
    mean = Kq.T @ fac.alpha
    var = np.maximum(hp.signal_variance - np.sum(Kq * (fac.A @ Kq), axis=0), VAR_FLOOR)
    return mean, var


def zeta_bootstrap(model: GPModel, n_partitions: int, queries, rng: np.random.Generator | None = None, *,
                   partitions=None, ws: BootstrapWorkspace | None = None) -> np.ndarray:
    """Symmetric KL between half-data posteriors, averaged over bi-partitions."""
    if ws is None:
        ws = build_bootstrap(model, n_partitions, rng, partitions)
    elif ws.model_token != (id(model), model.version):
        raise StaleWorkspaceError("bootstrap workspace does not match the current model fit")
    Xq = model.normalize_queries(queries)
    total = np.zeros(len(Xq))
    for (half1, half2), (f1, f2) in zip(ws.partitions, ws.factors):
        for k in range(model.output_dim):
            m1, v1 = _half_posterior(model, half1, f1[k], Xq, k)
            m2, v2 = _half_posterior(model, half2, f2[k], Xq, k)
            total += _sym_kl(m1, v1, m2, v2)
    return total / len(ws.partitions)


# ---------------------------------------------------------------------------
# entropy and trajectories


def entropy_baseline(model: GPModel, queries) -> np.ndarray:
    """Differential entropy of the latent predictive Gaussian, summed over outputs."""
    post = predict(model, queries)
    return 0.5 * np.sum(LOG_2PI_E + np.log(np.maximum(post.var, VAR_FLOOR)), axis=1)


def zeta_trajectory(metric: Callable[[np.ndarray], np.ndarray], inputs, gamma: float) -> float:
    """Discounted sum of a pointwise metric along a trajectory of model inputs."""
    inputs = np.atleast_2d(inputs)
    if len(inputs) == 0:
        raise ValueError("trajectory must contain at least one step")
    values = np.asarray(metric(inputs), dtype=float)
    return float(np.sum(gamma ** np.arange(len(values)) * values))


METRIC_NAMES = ("loo", "bootstrap", "entropy")


def make_metric(name: str, model: GPModel, *, n_partitions: int = 8, rng: np.random.Generator | None = None,
                loo_subsample: int | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Pointwise evaluator ``queries -> values`` for one of ``METRIC_NAMES``."""
    if name == "loo":
        ws = build_workspace(model)
        return lambda q: zeta_loo(model, ws, q, subsample=loo_subsample, rng=rng)
    if name == "bootstrap":
        bws = build_bootstrap(model, n_partitions, rng)
        return lambda q: zeta_bootstrap(model, n_partitions, q, ws=bws)
    if name == "entropy":
        return lambda q: entropy_baseline(model, q)
    raise ValueError(f"unknown metric {name!r}; choose from {METRIC_NAMES}")


def min_scaled_distance(model: GPModel, queries) -> np.ndarray:
    """Distance to the nearest training input in lengthscale units, per output (n_queries, n_outputs)."""
    Xq = model.normalize_queries(queries)
    out = np.empty((len(Xq), model.output_dim))
    for k, hp in enumerate(model.hyperparams):
        Xs, Qs = model.X / hp.lengthscales, Xq / hp.lengthscales
        d2 = (Qs**2).sum(1)[:, None] + (Xs**2).sum(1)[None, :] - 2 * Qs @ Xs.T
        out[:, k] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridAxis:
    dim: int
    lo: float
    hi: float
    resolution: int

    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.resolution)


@dataclass(frozen=True)
class GridSpec:
    """A 2-D slice through state space.

    ``base_state`` supplies the values of the dimensions that are not on an
    axis; the metric is averaged over ``actions``.
    """

    axis0: GridAxis
    axis1: GridAxis
    base_state: tuple[float, ...]
    actions: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.axis0.dim == self.axis1.dim:
            raise ValueError("grid axes must index different state dimensions")
        for ax in (self.axis0, self.axis1):
            if ax.resolution < 1 or not 0 <= ax.dim < len(self.base_state):
                raise ValueError(f"invalid grid axis {ax}")

    def states(self) -> np.ndarray:
        """Grid states in row-major order (axis0 outer)."""
        a0, a1 = np.meshgrid(self.axis0.values(), self.axis1.values(), indexing="ij")
        states = np.tile(np.asarray(self.base_state, dtype=float), (a0.size, 1))
        states[:, self.axis0.dim] = a0.ravel()
        states[:, self.axis1.dim] = a1.ravel()
        return states

    def to_dict(self) -> dict:
        return {"axis0": asdict(self.axis0), "axis1": asdict(self.axis1),
                "base_state": list(self.base_state), "actions": list(self.actions)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(GridAxis(**d["axis0"]), GridAxis(**d["axis1"]),
                   tuple(d["base_state"]), tuple(d.get("actions", (0.0,))))


@dataclass
class MetricGrid:
    spec: GridSpec
    values: np.ndarray
    metric: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def axis0(self) -> np.ndarray:
        return self.spec.axis0.values()

    @property
    def axis1(self) -> np.ndarray:
        return self.spec.axis1.values()


def metric_grid(metric: Callable[[np.ndarray], np.ndarray], spec: GridSpec, env, name: str = "") -> MetricGrid:
    states = spec.states()
    acc = np.zeros(len(states))
    for a in spec.actions:
        acc += metric(env.features(states, np.full((len(states), env.action_dim), a)))
    values = (acc / len(spec.actions)).reshape(spec.axis0.resolution, spec.axis1.resolution)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("metric produced non-finite values on the grid")
    return MetricGrid(spec, values, name)


def write_grid_csv(path, grid: MetricGrid, meta: dict | None = None) -> None:
    """CSV ``axis0,axis1,value`` in row-major order plus a JSON sidecar."""
    a0, a1 = np.meshgrid(grid.axis0, grid.axis1, indexing="ij")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis0", "axis1", "value"])
        for x, y, v in zip(a0.ravel(), a1.ravel(), grid.values.ravel()):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
    sidecar = {"metric": grid.metric, "grid": grid.spec.to_dict(), **grid.meta, **(meta or {})}
    with open(f"{path}.meta.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def read_grid_csv(path):
    """Return (axis0 values, axis1 values, value matrix) from a grid CSV."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    axis0 = np.unique(rows[:, 0])
    axis1 = np.unique(rows[:, 1])
    return axis0, axis1, rows[:, 2].reshape(len(axis0), len(axis1))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
