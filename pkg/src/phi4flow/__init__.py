"""Pseudospectral simulation and Monte Carlo verification harness for the
dynamic phi^4 model on the two-dimensional torus."""

__version__ = "0.1.0"

from .spectral import Field, TorusGrid, Lp, Sobolev, BesovInfInf, norm
from .noise import NoiseStream, OuState, wick_constant, c_t_infty
from .dynamics import Phi4Model, Trajectory, simulate, evolve
from .linearization import TangentFlow, operator_norm, propagate, adjoint_propagate
from .stopping import StoppingConfig, calibrate_eta, run_with_restarts

__all__ = [
    "__version__",
    "Field",
    "TorusGrid",
    "Lp",
    "Sobolev",
    "BesovInfInf",
    "norm",
    "NoiseStream",
    "OuState",
    "wick_constant",
    "c_t_infty",
    "Phi4Model",
    "Trajectory",
    "simulate",
    "evolve",
    "TangentFlow",
    "operator_norm",
    "propagate",
    "adjoint_propagate",
    "StoppingConfig",
    "calibrate_eta",
    "run_with_restarts",
]
