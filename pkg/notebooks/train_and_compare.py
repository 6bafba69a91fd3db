"""Train the constrained agent and its unconstrained ablation, then compare.

The ablation switches off both the CVaR penalty and the exploration
objective, leaving a plain clipped policy-gradient learner on the GP
model. Both runs share the seed and every other setting.

Run with ``python3 notebooks/train_and_compare.py [out_dir] [env_iterations]``.
The full setting (50 env-iterations) takes a few minutes per run.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from samba.analysis import compare, evaluate  # noqa: E402
from samba.config import default_config  # noqa: E402
from samba.training import read_rows, train  # noqa: E402

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs")
J = int(sys.argv[2]) if len(sys.argv) > 2 else 50

cfg = default_config()
cfg.runner.env_iterations = J
env = cfg.make_env()
dirs = {}
for name, c in (("samba", cfg), ("ablation", cfg.ablation())):
    dirs[name] = out / name
    bundle, log = train(c, dirs[name])
    print(f"{name}: {log.cumulative_samples} real samples")
    rep = evaluate(bundle, env, n_samples=3000, seeds=(0, 1, 2), out_dir=dirs[name]).overall
    print(f"  evaluation: TV {rep.tv}, TC {rep.tc:.3f}, loss CVaR {rep.loss_cvar:.4f} "
          f"(limit {c.agent.xi}), cost return {rep.cost_return:.1f}")

rows, _ = compare(list(dirs.values()), out / "comparison.csv", names=list(dirs))
print(f"wrote {out / 'comparison.csv'}")

# multiplier and model-side CVaR over the control updates of the constrained run
diag = read_rows(dirs["samba"] / "diagnostics.csv")
fig, ax = plt.subplots(1, 2, figsize=(11, 3.8))
ax[0].plot([float(r["cvar"]) for r in diag])
ax[0].axhline(cfg.agent.xi, color="r", ls="--")
ax[0].set(title="model-batch CVaR", xlabel="control update")
ax[1].plot([float(r["lambda_pi"]) for r in diag], label="cost weight")
ax[1].plot(np.array([float(r["lambda_cvar"]) for r in diag]) / cfg.agent.lambda_cvar_init,
           label="CVaR multiplier / initial")
ax[1].set(title="weights", xlabel="control update")
ax[1].legend()
fig.tight_layout()
fig.savefig(out / "diagnostics.png", dpi=120)
print(f"wrote {out / 'diagnostics.png'}")
