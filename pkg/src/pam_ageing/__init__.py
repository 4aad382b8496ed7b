"""Ageing of the parabolic Anderson model with Pareto potential.

Exact analytics of the ageing function, an event-driven tracker of the
variational maximizer, a lattice solver for the normalized profile and the
limiting point-process model, with Monte Carlo drivers that compare them.
"""
__version__ = "0.1.0"

from .analytics import PRESETS, ModelParams, phi, reg_inc_beta, scale_a, scale_r
from .errors import DomainError, ResourceError, StabilityError

__all__ = [
    "PRESETS",
    "ModelParams",
    "phi",
    "reg_inc_beta",
    "scale_a",
    "scale_r",
    "DomainError",
    "ResourceError",
    "StabilityError",
    "__version__",
]
