import logging

from .case_io import builtin_case, load_case, load_se_case, parse_case, save_case, save_se_case
from .casegen import NoiseSpec, SeCase, generate_se_case, synthetic_case
from .evaluation import StoppingRule, ci_stopping, run_experiment, run_trials, sigma_max, sigma_ss
from .exceptions import CircuitSEError
from .grid import Branch, Bus, Gen, GridCase
from .linear_se import solve_linear_se
from .montecarlo import McConfig, compare_spreads, run_mc
from .network import PerturbationSpec, build_split_admittance
from .nonlinear_se import NlOptions, solve_nonlinear_se
from .powerflow import PfOptions, solve_power_flow

__version__ = "0.3.0"

logging.getLogger("circuitse").addHandler(logging.NullHandler())

__all__ = [
    "Branch",
    "Bus",
    "CircuitSEError",
    "Gen",
    "GridCase",
    "McConfig",
    "NlOptions",
    "NoiseSpec",
    "PerturbationSpec",
    "PfOptions",
    "SeCase",
    "StoppingRule",
    "build_split_admittance",
    "builtin_case",
    "ci_stopping",
    "compare_spreads",
    "generate_se_case",
    "load_case",
    "load_se_case",
    "parse_case",
    "run_experiment",
    "run_mc",
    "run_trials",
    "save_case",
    "save_se_case",
    "sigma_max",
    "sigma_ss",
    "solve_linear_se",
    "solve_nonlinear_se",
    "solve_power_flow",
    "synthetic_case",
]
