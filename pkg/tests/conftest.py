import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from samba.envs import SafeEnv, SafetySpec  # noqa: E402
from samba.gp import GPModel, KernelHyperparams, TransitionDataset  # noqa: E402


def random_model(rng, n, d, p=1, noise=None, normalize=False):
    """A GP with random data and random (fixed) hyperparameters."""
    X = rng.normal(size=(n, d))
    Y = rng.normal(size=(n, p))
    hps = [
        KernelHyperparams.from_values(
            rng.uniform(0.5, 2.0, size=d), rng.uniform(0.5, 2.0),
            noise if noise is not None else rng.uniform(0.01, 0.2),
        )
        for _ in range(p)
    ]
    return GPModel(TransitionDataset(X, Y, normalize=normalize), hps).refactor()


class LinearEnv(SafeEnv):
    """Stable linear system ``x' = A x + b u`` with a safety band on the first coordinate."""

    name = "linear_stub"
    state_dim = 2

    A = np.array([[0.95, 0.1], [-0.1, 0.9]])
    b = np.array([0.0, 0.1])

    def __init__(self):
        super().__init__(SafetySpec(0.2, 0.3, 0.2, 0.1), terminate=False)

    @property
    def action_bound(self) -> float:
        return 1.0

    def step(self, state, action):
        state = np.asarray(state, dtype=float)
        u = np.clip(np.asarray(action, dtype=float).reshape(state.shape[:-1]), -1.0, 1.0)
        return state @ self.A.T + u[..., None] * self.b

    def cost(self, state, action):
        state = np.asarray(state, dtype=float)
        u = np.asarray(action, dtype=float).reshape(state.shape[:-1])
        return np.sum(state**2, axis=-1) + 0.01 * u**2

    def reset(self, rng, size=None):
        shape = (2,) if size is None else (size, 2)
        return rng.uniform(-0.5, 0.5, size=shape)

    def observe(self, state):
        return np.asarray(state, dtype=float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "ACCEPTANCE", None)
    if not results:
        return
    terminalreporter.section("acceptance")
    for name, (ok, detail) in results.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
