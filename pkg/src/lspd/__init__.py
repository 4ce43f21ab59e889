"""Stochastic primal-dual unrolling for tomographic reconstruction."""

from . import autodiff, linops, metrics, simdata, solvers, theory, train, unroll

__version__ = "0.1.0"

__all__ = ["autodiff", "linops", "metrics", "simdata", "solvers", "theory", "train", "unroll"]
