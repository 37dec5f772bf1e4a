"""Sparse control of high-dimensional Cucker-Smale systems through JL projections."""

from __future__ import annotations

from ._version import __version__
from .analysis import TheoryConstants, compute_constants, error_series
from .configs import generate_config, load_initial_state, save_initial_state
from .control import DRMode, RunRecord, Strategy, StrategyKind, run_dr, run_strategy
from .dynamics import SimulationBlowUp, Trajectory, rk4_step, run_sampled
from .jl import JLFamily, ProjectionMatrix, check_weak_jl, generate
from .model import (
    ControlVector,
    FlockState,
    ModelParams,
    Moments,
    consensus_margin,
    gamma_functional,
    moments,
)

__all__: list[str] = [
    "ControlVector",
    "DRMode",
    "FlockState",
    "JLFamily",
    "ModelParams",
    "Moments",
    "ProjectionMatrix",
    "RunRecord",
    "SimulationBlowUp",
    "Strategy",
    "StrategyKind",
    "TheoryConstants",
    "Trajectory",
    "__version__",
    "check_weak_jl",
    "compute_constants",
    "consensus_margin",
    "error_series",
    "gamma_functional",
    "generate",
    "generate_config",
    "load_initial_state",
    "moments",
    "rk4_step",
    "run_dr",
    "run_sampled",
    "run_strategy",
    "save_initial_state",
    "version",
]

version: str = __version__
