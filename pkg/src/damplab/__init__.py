"""Numerical laboratory for nonlinearly damped skew systems ``x' = A x - B phi(B^T x)``.

Submodules
----------
model
    Wave (modal) and beam-with-tip-body (finite element) systems.
nonlinearity
    Damping maps and sampled checks of their structural hypotheses.
integrator
    Structure-preserving time stepping and energy accounting.
spectral
    Resolvent norms, spectral gaps and observability constants.
decay
    Decay-exponent fits and invariant checks.
cli
    Scenario runner (``damplab`` command).
"""

from .model import (
    DampedSystem,
    MultiplierConfig,
    ScoleConfig,
    WaveModelConfig,
    build_scole_fem,
    build_wave_modal,
    check_multiplier_condition,
    critical_initial_state,
    graph_seminorm,
    sine_coefficients,
    smooth_initial_state,
)
from .nonlinearity import Nonlinearity, from_name
from .integrator import Schedule, Trajectory, integrate

__version__ = "0.1.0"

__all__ = [
    "DampedSystem",
    "MultiplierConfig",
    "ScoleConfig",
    "WaveModelConfig",
    "build_scole_fem",
    "build_wave_modal",
    "check_multiplier_condition",
    "critical_initial_state",
    "graph_seminorm",
    "sine_coefficients",
    "smooth_initial_state",
    "Nonlinearity",
    "from_name",
    "Schedule",
    "Trajectory",
    "integrate",
]
