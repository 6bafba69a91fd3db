"""Exact Gaussian-process regression for the learned transition model.

Each output dimension gets its own ARD RBF GP. Hyperparameters are kept as
log-values and fitted by maximizing the exact marginal log likelihood; the
posterior is computed from a cached Cholesky factor of ``K + noise * I`` and
its explicit inverse ``A``, which the leave-one-out metrics reuse.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

LOG_2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
CHECKPOINT_VERSION = 1


class ModelFitError(RuntimeError):
    """Raised when the kernel matrix cannot be factorized."""


class ModelStateError(RuntimeError):
    """Raised when a model is used before it has been fitted."""


@dataclass
class KernelHyperparams:
    """ARD RBF hyperparameters, stored as logs so optimization stays unconstrained."""

    log_lengthscales: np.ndarray
    log_signal_variance: float = 0.0
    log_noise_variance: float = math.log(1e-2)

    def __post_init__(self):
        self.log_lengthscales = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float)).copy()
        self.log_signal_variance = float(self.log_signal_variance)
        self.log_noise_variance = float(self.log_noise_variance)

    @classmethod
    def from_values(cls, lengthscales, signal_variance=1.0, noise_variance=1e-2) -> "KernelHyperparams":
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if np.any(ls <= 0) or signal_variance <= 0 or noise_variance <= 0:
            raise ValueError("hyperparameters must be strictly positive")
        return cls(np.log(ls), math.log(signal_variance), math.log(noise_variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)

    @property
    def input_dim(self) -> int:
        return len(self.log_lengthscales)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_lengthscales, [self.log_signal_variance, self.log_noise_variance]])

    @classmethod
    def from_vector(cls, vec) -> "KernelHyperparams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:-2], vec[-2], vec[-1])

    def copy(self) -> "KernelHyperparams":
        return KernelHyperparams.from_vector(self.to_vector())


def _scaled(X, hp: KernelHyperparams):
    return np.asarray(X, dtype=float) / hp.lengthscales


def sq_dist(X1, X2):
    """Pairwise squared Euclidean distances, clipped at zero."""
    d = (X1**2).sum(-1)[:, None] + (X2**2).sum(-1)[None, :] - 2.0 * X1 @ X2.T
    return np.maximum(d, 0.0)


def rbf_kernel(x, x2, hp: KernelHyperparams) -> float:
    """Scalar ARD RBF covariance between two input vectors."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.shape[0] != hp.input_dim:
        raise ValueError(f"input dimensions {x.shape}, {x2.shape} do not match {hp.input_dim} lengthscales")
    r2 = np.sum(((x - x2) / hp.lengthscales) ** 2)
    return hp.signal_variance * math.exp(-0.5 * r2)


def rbf_gram(X1, X2, hp: KernelHyperparams) -> np.ndarray:
    """Covariance matrix between the rows of ``X1`` and ``X2`` (noise excluded)."""
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    if X1.shape[1] != hp.input_dim or X2.shape[1] != hp.input_dim:
        raise ValueError("input dimension does not match lengthscales")
    return hp.signal_variance * np.exp(-0.5 * sq_dist(_scaled(X1, hp), _scaled(X2, hp)))


# ---------------------------------------------------------------------------
# data


@dataclass
class TransitionDataset:
    """GP training set: model inputs and successor-state deltas.

    ``inputs`` and ``targets`` hold raw (unnormalized) values. The
    normalization statistics are computed once, at construction.
    """

    inputs: np.ndarray
    targets: np.ndarray
    normalize: bool = True
    input_mean: np.ndarray = field(init=False)
    input_std: np.ndarray = field(init=False)
    target_mean: np.ndarray = field(init=False)
    target_std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-D arrays")
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have the same number of rows")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")
        self.input_mean, self.input_std = _stats(self.inputs, self.normalize)
        self.target_mean, self.target_std = _stats(self.targets, self.normalize)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]

    def normalize_inputs(self, X):
        return (np.asarray(X, dtype=float) - self.input_mean) / self.input_std

    def denormalize_inputs(self, Xn):
        return np.asarray(Xn, dtype=float) * self.input_std + self.input_mean

    def normalize_targets(self, Y):
        return (np.asarray(Y, dtype=float) - self.target_mean) / self.target_std

    def denormalize_targets(self, Yn):
        return np.asarray(Yn, dtype=float) * self.target_std + self.target_mean

    def append(self, inputs, targets) -> "TransitionDataset":
        """Concatenate new rows; statistics are recomputed on the result."""
        inputs = np.asarray(inputs, dtype=float).reshape(-1, self.input_dim)
        targets = np.asarray(targets, dtype=float).reshape(-1, self.output_dim)
        return TransitionDataset(
            np.vstack([self.inputs, inputs]), np.vstack([self.targets, targets]), self.normalize
        )

    @classmethod
    def empty(cls, input_dim: int, output_dim: int, normalize: bool = True) -> "TransitionDataset":
        return cls(np.zeros((0, input_dim)), np.zeros((0, output_dim)), normalize)


def _stats(Z, normalize):
    d = Z.shape[1]
    if not normalize or len(Z) == 0:
        return np.zeros(d), np.ones(d)
    mean = Z.mean(axis=0)
    std = Z.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


# ---------------------------------------------------------------------------
# model


@dataclass
class Factor:
    """Cached solves for one output dimension."""

    chol: np.ndarray
    A: np.ndarray
    alpha: np.ndarray
    jitter: float


@dataclass
class GPPosterior:
    """Predictive latent posterior, in normalized target units.

    ``mean`` and ``var`` have shape (n_queries, n_outputs); ``cov`` is
    (n_outputs, n_queries, n_queries) and only set for ``full_cov=True``.
    """

    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None


class GPModel:
    """Independent exact GPs, one per output dimension, sharing the inputs."""

    def __init__(self, data: TransitionDataset, hyperparams: list[KernelHyperparams] | None = None):
        self.data = data
        if hyperparams is None:
            hyperparams = [default_hyperparams(data.input_dim) for _ in range(data.output_dim)]
        if len(hyperparams) != data.output_dim:
            raise ValueError("need one set of hyperparameters per output dimension")
        self.hyperparams = [hp.copy() for hp in hyperparams]
        self.X = data.normalize_inputs(data.inputs)
        self.Y = data.normalize_targets(data.targets)
        self.factors: list[Factor] | None = None
        self.version = 0

    @property
    def n_train(self) -> int:
        return len(self.X)

    @property
    def input_dim(self) -> int:
        return self.data.input_dim

    @property
    def output_dim(self) -> int:
        return self.data.output_dim

    @property
    def is_fitted(self) -> bool:
        return self.factors is not None

    def refactor(self) -> "GPModel":
        """(Re)compute Cholesky factors for the current hyperparameters."""
        self.factors = [factorize(self.X, self.Y[:, k], hp) for k, hp in enumerate(self.hyperparams)]
        self.version += 1
        return self

    def normalize_queries(self, queries):
        return self.data.normalize_inputs(np.atleast_2d(queries))


def default_hyperparams(input_dim: int) -> KernelHyperparams:
    return KernelHyperparams.from_values(np.ones(input_dim), 1.0, 1e-2)


def factorize(X, y, hp: KernelHyperparams) -> Factor:
    """Cholesky of ``K + noise * I`` with jitter escalation."""
    n = len(X)
    if n == 0:
        return Factor(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0), 0.0)
    K = rbf_gram(X, X, hp)
    K[np.diag_indices(n)] += hp.noise_variance
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(n) if jitter else K)
        except np.linalg.LinAlgError:
            continue
        A = cho_solve((L, True), np.eye(n))
        A = 0.5 * (A + A.T)
        return Factor(L, A, cho_solve((L, True), y), jitter)
    raise ModelFitError(f"Cholesky failed for n={n} even with jitter {JITTER_LADDER[-1]:g}")


def _require_fitted(model: GPModel):
    if not model.is_fitted:
        raise ModelStateError("model has no cached factors; call fit() or refactor() first")


def _mll_single(X, y, hp: KernelHyperparams, with_grad: bool = True):
    n = len(X)
    fac = factorize(X, y, hp)
    mll = -0.5 * y @ fac.alpha - np.log(np.diag(fac.chol)).sum() - 0.5 * n * LOG_2PI
    if not with_grad:
        return mll, None
    Xs = _scaled(X, hp)
    Kf = hp.signal_variance * np.exp(-0.5 * sq_dist(Xs, Xs))
    W = np.outer(fac.alpha, fac.alpha) - fac.A
    WK = W * Kf
    grad = np.empty(hp.input_dim + 2)
    for d in range(hp.input_dim):
        diff = Xs[:, d][:, None] - Xs[:, d][None, :]
        grad[d] = 0.5 * np.sum(WK * diff**2)
    grad[-2] = 0.5 * WK.sum()
    grad[-1] = 0.5 * hp.noise_variance * np.trace(W)
    return mll, grad


def marginal_log_likelihood(model: GPModel, with_grad: bool = False):
    """Exact MLL summed over output dimensions.

    With ``with_grad`` also returns a list holding, per output dimension, the
    gradient with respect to ``KernelHyperparams.to_vector()``.
    """
    total, grads = 0.0, []
    for k, hp in enumerate(model.hyperparams):
        if model.n_train == 0:
            grads.append(np.zeros(hp.input_dim + 2))
            continue
        if not with_grad and model.factors is not None:
            fac = model.factors[k]
            y = model.Y[:, k]
            total += -0.5 * y @ fac.alpha - np.log(np.diag(fac.chol)).sum() - 0.5 * len(y) * LOG_2PI
            continue
        mll, g = _mll_single(model.X, model.Y[:, k], hp, with_grad)
        total += mll
        grads.append(g)
    return (total, grads) if with_grad else total


@dataclass
class FitResult:
    n_iter: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    mll_trace: list[list[float]] = field(default_factory=list)
    projected_grad_norm: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class HyperBounds:
    """Box constraints on log-hyperparameters; lengthscales are in standardized input units.

    The lengthscale cap keeps near-linear dynamics from collapsing to a
    global linear fit, which would erase the locality of the kernel.
    """

    log_lengthscale: tuple[float, float] = (math.log(1e-3), math.log(3.0))
    log_signal_variance: tuple[float, float] = (math.log(1e-4), math.log(1e4))
    log_noise_variance: tuple[float, float] = (math.log(1e-6), math.log(10.0))

    def for_dim(self, input_dim: int):
        return [self.log_lengthscale] * input_dim + [self.log_signal_variance, self.log_noise_variance]


def projected_gradient(x, g, bounds) -> np.ndarray:
    """Zero the components of an ascent gradient that push against active bounds."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    g = g.copy()
    g[(x <= lo + 1e-10) & (g < 0)] = 0.0
    g[(x >= hi - 1e-10) & (g > 0)] = 0.0
    return g


def fit(
    data: TransitionDataset,
    opt_iters: int = 300,
    lr: float = 0.1,
    *,
    tol: float = 1e-5,
    init: list[KernelHyperparams] | None = None,
    optimizer: str = "lbfgs",
    bounds: HyperBounds = HyperBounds(),
    max_points: int | None = None,
    rng: np.random.Generator | None = None,
    result: FitResult | None = None,
    cold_restart: bool = False,
) -> GPModel:
    """Fit per-output hyperparameters by maximizing the exact MLL.

    The objective is the MLL divided by the number of training points, so
    ``tol`` and ``lr`` do not depend on the dataset size. ``optimizer`` is
    ``"lbfgs"`` (bounded quasi-Newton) or ``"gradient"`` (gradient ascent
    with backtracking). Both accept only non-decreasing steps. If
    ``max_points`` is set, hyperparameters are fitted on a random subset of
    that size and the returned model conditions on all of ``data``. With
    ``cold_restart`` each output is also optimized from the default
    hyperparameters and the start with the higher final MLL wins, so a warm
    start stuck in a noise-only optimum can recover.
    """
    if len(data) < 2:
        raise ValueError("need at least two training points to fit hyperparameters")
    model = GPModel(data, init)
    X, Y = model.X, model.Y
    if max_points is not None and len(X) > max_points:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(len(X), size=max_points, replace=False))
        X, Y = X[idx], Y[idx]
    result = result if result is not None else FitResult()
    bnds = bounds.for_dim(data.input_dim)
    lo = np.array([b[0] for b in bnds])
    hi = np.array([b[1] for b in bnds])
    n = len(X)

    for k in range(data.output_dim):
        y = Y[:, k]
        starts = [np.clip(model.hyperparams[k].to_vector(), lo, hi)]
        if cold_restart and init is not None:
            starts.append(np.clip(default_hyperparams(data.input_dim).to_vector(), lo, hi))
        cache: dict[bytes, tuple[float, np.ndarray]] = {}

        def objective(v, y=y, cache=cache):
            key = v.tobytes()
            if key not in cache:
                try:
                    f, g = _mll_single(X, y, KernelHyperparams.from_vector(v))
                except ModelFitError:
                    f, g = -np.inf, np.zeros_like(v)
                cache[key] = (f / n, g / n)
            return cache[key]

        best = None
        for x0 in starts:
            xs, nit, trace = _optimize(objective, x0, bnds, lo, hi, optimizer, opt_iters, lr, tol)
            if best is None or objective(xs)[0] > objective(best[0])[0]:
                best = (xs, nit, trace)
        xbest, nit, trace = best
        pg = projected_gradient(xbest, objective(xbest)[1], bnds)
        model.hyperparams[k] = KernelHyperparams.from_vector(xbest)
        result.n_iter.append(nit)
        result.mll_trace.append(trace)
        result.projected_grad_norm.append(float(np.linalg.norm(pg, np.inf)))
        result.converged.append(bool(np.linalg.norm(pg, np.inf) < tol))
    return model.refactor()


def _optimize(objective, x0, bnds, lo, hi, optimizer, opt_iters, lr, tol):
    trace = [objective(x0)[0]]
    if optimizer == "lbfgs":
        def neg(v):
            f, g = objective(v)
            if not np.isfinite(f):
                return 1e300, np.zeros_like(v)
            return -f, -g

        def record(v):
            trace.append(objective(v)[0])

        res = minimize(
            neg, x0, jac=True, method="L-BFGS-B", bounds=bnds, callback=record,
            options={"maxiter": opt_iters, "gtol": tol, "ftol": 0.0, "maxls": 40},
        )
        xbest, nit = res.x, int(res.nit)
        if objective(xbest)[0] < trace[0]:
            xbest = x0
    elif optimizer == "gradient":
        xbest, nit = _gradient_ascent(objective, x0, lo, hi, opt_iters, lr, tol, trace)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    return xbest, nit, trace


def _gradient_ascent(objective, x, lo, hi, iters, lr, tol, trace):
    f, g = objective(x)
    step = lr
    nit = 0
    for nit in range(1, iters + 1):
        pg = projected_gradient(x, g, list(zip(lo, hi)))
        if np.linalg.norm(pg, np.inf) < tol:
            return x, nit - 1
        for _ in range(30):
            cand = np.clip(x + step * g, lo, hi)
            fc, gc = objective(cand)
            if fc >= f:
                break
            step *= 0.5
        else:
            return x, nit
        x, f, g = cand, fc, gc
        trace.append(f)
        step = min(step * 1.5, 100.0 * lr)
    return x, nit


def predict(model: GPModel, queries, full_cov: bool = False, normalized: bool = False) -> GPPosterior:
    """Latent posterior at ``queries`` (raw model inputs unless ``normalized``)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if queries.shape[1] != model.input_dim:
        raise ValueError(f"queries have dimension {queries.shape[1]}, model expects {model.input_dim}")
    Xq = queries if normalized else model.normalize_queries(queries)
    m = len(Xq)
    if model.n_train > 0:
        _require_fitted(model)
    means = np.zeros((m, model.output_dim))
    variances = np.zeros((m, model.output_dim))
    covs = np.zeros((model.output_dim, m, m)) if full_cov else None
    for k, hp in enumerate(model.hyperparams):
        if full_cov:
            prior = rbf_gram(Xq, Xq, hp)
        else:
            prior = np.full(m, hp.signal_variance)
        if model.n_train == 0:
            mean = np.zeros(m)
            post = prior
        else:
            fac = model.factors[k]
            Kq = rbf_gram(model.X, Xq, hp)
            mean = Kq.T @ fac.alpha
            V = solve_triangular(fac.chol, Kq, lower=True)
            post = prior - V.T @ V if full_cov else prior - np.sum(V * V, axis=0)
        means[:, k] = mean
        if full_cov:
            post = 0.5 * (post + post.T)
            covs[k] = post
            variances[:, k] = np.maximum(np.diag(post), 0.0)
        else:
            variances[:, k] = np.maximum(post, 0.0)
    return GPPosterior(means, variances, covs)


def step_model(model: GPModel, env, state, action, rng: np.random.Generator):
    """Sample successor states from the GP (independent Gaussian per delta dim)."""
    state = np.asarray(state, dtype=float)
    post = predict(model, env.features(state, action).reshape(-1, model.input_dim))
    eps = rng.standard_normal(post.mean.shape)
    delta_n = post.mean + np.sqrt(post.var) * eps
    delta = model.data.denormalize_targets(delta_n).reshape(state.shape)
    return env.apply_delta(state, delta)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: GPModel, **meta) -> None:
    """Write hyperparameters, normalization flag and training data; factors are rebuilt on load."""
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "inputs": model.data.inputs,
        "targets": model.data.targets,
        "normalize": np.array(model.data.normalize),
        "hyperparams": np.stack([hp.to_vector() for hp in model.hyperparams]),
    }
    for key, val in meta.items():
        arrays[f"meta_{key}"] = np.array(val)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> tuple[GPModel, dict]:
    with np.load(path, allow_pickle=False) as f:
        version = int(f["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported model checkpoint version {version}")
        data = TransitionDataset(f["inputs"], f["targets"], bool(f["normalize"]))
        hps = [KernelHyperparams.from_vector(v) for v in f["hyperparams"]]
        meta = {k[5:]: f[k].item() for k in f.files if k.startswith("meta_")}
    return GPModel(data, hps).refactor(), meta
