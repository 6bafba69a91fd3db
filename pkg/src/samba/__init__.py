"""Safe active model-based policy search.

Gaussian-process dynamics models, out-of-sample exploration metrics and a
CVaR-constrained bi-objective policy optimiser, with two safety-augmented
classic-control environments.
"""

from .config import RunConfig, default_config, load_config
from .cvar import CvarConfig, SolverState, cvar_empirical, min_norm_lambda, update_lambda_cvar
from .envs import SafeCartPoleDoublePendulum, SafePendulum, SafetySpec, make_env
from .gp import GPModel, KernelHyperparams, TransitionDataset, fit, predict
from .metrics import entropy_baseline, kl_gaussian, zeta_bootstrap, zeta_loo
from .policy import Critic, GaussianPolicy, PolicyBundle
from .training import train

__version__ = "0.1.0"
