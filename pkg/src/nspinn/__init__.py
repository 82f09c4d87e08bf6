"""Mesh-free Navier-Stokes network training toolkit.

Subpackages: scalar-graph reverse-mode differentiation (`autodiff`,
`engine`), tanh-MLP and spline-blend networks (`nets`), Sobol collocation
sampling (`sampling`), per-case residual and loss assembly (`physics`),
adaptive loss weighting (`balancing`), the Adam training loop (`trainer`),
RMSE scoring and exports (`evaluation`), and the command line (`cli`).
"""

from . import (autodiff, balancing, cli, engine, evaluation, nets, physics,
               sampling, trainer)

__all__ = ["autodiff", "balancing", "cli", "engine", "evaluation", "nets",
           "physics", "sampling", "trainer"]
__version__ = "0.1.0"
