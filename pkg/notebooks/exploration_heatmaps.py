"""Where does each exploration signal point?

Fit a GP dynamics model on 100 transitions drawn from the safe initial
distribution of the pendulum, then map three signals over the
(angle, angular velocity) plane:

* the leave-one-out score, which is large only where training data sits;
* the bootstrap score, its two-halves counterpart;
* the predictive entropy, which grows with distance from the data.

Run with ``python3 notebooks/exploration_heatmaps.py [out_dir]``.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from samba.analysis import decode_states, default_grid  # noqa: E402
from samba.config import default_config  # noqa: E402
from samba.envs import SafePendulum  # noqa: E402
from samba.gp import TransitionDataset  # noqa: E402
from samba.metrics import make_metric, metric_grid, min_scaled_distance  # noqa: E402
from samba.training import fit_dynamics  # noqa: E402

out = Path(sys.argv[1] if len(sys.argv) > 1 else "heatmaps")
out.mkdir(parents=True, exist_ok=True)

env = SafePendulum()
rng = np.random.default_rng(0)
S = env.reset(rng, 100)
U = rng.uniform(-env.action_bound, env.action_bound, size=(100, env.action_dim))
model, _ = fit_dynamics(default_config(), TransitionDataset(env.features(S, U), env.state_delta(S, env.step(S, U))),
                        None, rng)
for k, hp in enumerate(model.hyperparams):
    print(f"output {k}: lengthscales {np.round(hp.lengthscales, 2)}, "
          f"signal var {hp.signal_variance:.3g}, noise var {hp.noise_variance:.1e}")

grid = default_grid(env, 50)
maps = {name: metric_grid(make_metric(name, model, rng=np.random.default_rng(1)), grid, env, name)
        for name in ("loo", "bootstrap", "entropy")}

# near / far split in lengthscale units
states = grid.states()
dist = min_scaled_distance(model, env.features(states, np.zeros((len(states), 1)))).mean(axis=1)
near, far = dist <= 1, dist > 3
for name, g in maps.items():
    v = g.values.ravel()
    print(f"{name:>9}: mean near {v[near].mean():.3g}, mean far {v[far].mean():.3g}")

train_states = decode_states(env, model.data.inputs)
fig, axes = plt.subplots(1, 3, figsize=(15, 4.5))
for ax, (name, g) in zip(axes, maps.items()):
    im = ax.pcolormesh(g.axis0, g.axis1, g.values.T, shading="auto")
    ax.scatter(train_states[:, 0], train_states[:, 1], s=6, c="white", edgecolors="k", linewidths=0.3)
    for edge in (env.spec.hz_min, env.spec.hz_max):
        ax.axvline(edge, color="r", ls="--", lw=0.8)
    for edge in (env.spec.usr_min, env.spec.usr_max):
        ax.axvline(edge, color="r", lw=1.2)
    ax.set(title=name, xlabel="angle [rad]", ylabel="angular velocity [rad/s]")
    fig.colorbar(im, ax=ax)
fig.tight_layout()
fig.savefig(out / "heatmaps.png", dpi=120)
print(f"wrote {out / 'heatmaps.png'}")
