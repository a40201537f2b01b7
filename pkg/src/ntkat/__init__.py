"""Adversarial training of wide networks through the neural tangent kernel.

Submodules
----------
kernels      analytic NNGP / NTK / ARK recursions and NTK input gradients
finite_net   finite MLPs, empirical kernels, gradient-flow and SGD adversarial training
dynamics     closed-form linearised AT dynamics, ODE oracle, degeneration analysis
matfun       matrix exponential and its Frechet adjoint
advntk       the Adv-NTK model and training loop
attacks      l-infinity PGD
harness      datasets, configs, experiment runners and the ``ntkat`` CLI
"""
from .advntk import AdvNtkModel, NtkRegressor, advntk_eval, advntk_grad_varpi, advntk_grad_x, advntk_train
from .attacks import PgdConfig, pgd_linf
from .dynamics import (
    LinearizedState,
    RateSchedule,
    at_closed_form,
    degeneration_decompose,
    degeneration_limit_check,
    ensemble_mean_inf,
    ode_oracle_linearized,
    xi_matrix,
)
from .finite_net import (
    empirical_ark_diag,
    empirical_ntk,
    gradflow_at_simulate,
    mlp_forward,
    mlp_init,
    sgd_at_train,
)
from .kernels import Activation, NetSpec, ark_diag, ark_theta_x, ntk_grad_x, ntk_gram, ntk_theta
from .matfun import expm, expm_frechet_adjoint

__version__ = "0.1.0"

__all__ = [
    "Activation", "NetSpec", "ntk_theta", "ark_theta_x", "ntk_gram", "ark_diag", "ntk_grad_x",
    "mlp_init", "mlp_forward", "empirical_ntk", "empirical_ark_diag", "gradflow_at_simulate",
    "sgd_at_train", "RateSchedule", "LinearizedState", "xi_matrix", "at_closed_form",
    "ensemble_mean_inf", "ode_oracle_linearized", "degeneration_decompose",
    "degeneration_limit_check", "expm", "expm_frechet_adjoint", "AdvNtkModel", "NtkRegressor",
    "advntk_eval", "advntk_grad_varpi", "advntk_grad_x", "advntk_train", "PgdConfig", "pgd_linf",
]
