"""Data-driven stabilization of unstable periodic orbits in the Earth-Moon CR3BP.

Sparse polynomial return maps are fitted to Poincare-section data, validated
against the monodromy spectrum, and linearized to synthesize LMI-certified
impulsive feedback gains that are then flown in the full nonlinear model.
"""

from .catalog import HALO_TARGET_ID, LYAPUNOV_TARGET_ID, bundled_catalog_path, load_catalog
from .control import solve_lmi, synthesize
from .discovery import ensemble_discover, fit_map, linearize_at, validate_map
from .dynamics import EARTH_MOON, SystemParams, cr3bp_derivative, jacobi_constant, lagrange_points
from .integrator import IntegratorConfig, propagate, propagate_with_stm
from .loop import StabilizationConfig, stabilize
from .sections import get_section, sample_section_data
from .stability import classify_floquet, monodromy_at

__version__ = "0.1.0"

__all__ = [
    "EARTH_MOON",
    "HALO_TARGET_ID",
    "LYAPUNOV_TARGET_ID",
    "IntegratorConfig",
    "StabilizationConfig",
    "SystemParams",
    "bundled_catalog_path",
    "classify_floquet",
    "cr3bp_derivative",
    "ensemble_discover",
    "fit_map",
    "get_section",
    "jacobi_constant",
    "lagrange_points",
    "linearize_at",
    "load_catalog",
    "monodromy_at",
    "propagate",
    "propagate_with_stm",
    "sample_section_data",
    "solve_lmi",
    "stabilize",
    "synthesize",
    "validate_map",
]
