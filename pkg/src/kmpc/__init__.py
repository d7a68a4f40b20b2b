"""Kernel EDMD surrogates with certified bounds for tightened MPC."""

from .bounds import CertifiedBounds, certify
from .data import Box, ClusterDataset, VanDerPol, build_cluster_dataset, build_observation_grid, padua_points
from .experiment import ExperimentConfig, run_pipeline
from .kernels import KernelSpec, kernel_matrix, wendland_phi
from .mpc import MPCConfig, MPCController, max_feasible_horizon, solve_ocp
from .simulate import ClosedLoopTrace, run_closed_loop, trace_metrics
from .surrogate import SurrogateModel, fit_autonomous, fit_control_affine
from .terminal import TerminalIngredients, design_terminal

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CertifiedBounds",
    "ClosedLoopTrace",
    "ClusterDataset",
    "ExperimentConfig",
    "KernelSpec",
    "MPCConfig",
    "MPCController",
    "SurrogateModel",
    "TerminalIngredients",
    "VanDerPol",
    "build_cluster_dataset",
    "build_observation_grid",
    "certify",
    "design_terminal",
    "fit_autonomous",
    "fit_control_affine",
    "kernel_matrix",
    "max_feasible_horizon",
    "padua_points",
    "run_closed_loop",
    "run_pipeline",
    "solve_ocp",
    "trace_metrics",
    "wendland_phi",
]
