"""Spectral-element compressible Euler solver with IMEX time integration."""

from . import bench, cli, columnsolve, euler, imexcore, krylov, specgrid

__all__ = ["specgrid", "euler", "imexcore", "krylov", "columnsolve",
           "bench", "cli"]
__version__ = "0.1.0"
