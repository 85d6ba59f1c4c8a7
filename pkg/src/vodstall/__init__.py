"""Stall-duration bounds and joint optimization for erasure-coded video streaming."""
from __future__ import annotations

from .model import (
    ConfigError,
    DimensionError,
    InfeasibleError,
    Instance,
    OverloadError,
    PolicyVars,
    SolverConfig,
    load_config,
    load_instance,
    uniform_policy,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "InfeasibleError",
    "Instance",
    "OverloadError",
    "PolicyVars",
    "SolverConfig",
    "load_config",
    "load_instance",
    "uniform_policy",
]
