"""Poisson-clock approximation schemes for ODEs, SDEs, mean-field particle systems and 2-D
vorticity, with the reference solvers and statistics used to measure their convergence."""
from .randomness import JumpLaw, RngStream, build_jump_law, derive_stream
from .scheme import CoefficientSet, DivergenceError, coded, simulate_batch, simulate_path
from .scenarios import get_scenario

__version__ = "0.1.0"

__all__ = ["CoefficientSet", "DivergenceError", "JumpLaw", "RngStream", "build_jump_law", "coded",
           "derive_stream", "get_scenario", "simulate_batch", "simulate_path"]
