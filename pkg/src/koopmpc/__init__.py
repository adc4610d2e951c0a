"""Koopman lifted linear models, sparse identification and dense-form MPC."""

from .baseline import LinearSSModel, fit_arx
from .lifting import BasisSpec, DelaySpec, Trial, lift, monomial_count
from .mpc import ControllerConfig, MpcController, make_reference, mpc_step, run_closed_loop
from .plants import arm_surrogate_plant, exact_lifting_plant
from .qp import DenseQp, MpcProblemSpec, condense, solve_qp
from .regression import IdentifyConfig, KoopmanModel, fit_lasso, fit_least_squares, identify

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "ControllerConfig", "DelaySpec", "DenseQp", "IdentifyConfig",
    "KoopmanModel", "LinearSSModel", "MpcController", "MpcProblemSpec", "Trial",
    "arm_surrogate_plant", "condense", "exact_lifting_plant", "fit_arx", "fit_lasso",
    "fit_least_squares", "identify", "lift", "make_reference", "monomial_count",
    "mpc_step", "run_closed_loop", "solve_qp",
]
