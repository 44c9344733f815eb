"""Energy storage opportunity pricing from chance-constrained dispatch duals."""

__version__ = "0.1.0"

from .costs import CostPolynomial, FleetCurve, Segment, StorageSpec
from .dispatch import DispatchSolution, SystemSpec, build_dispatch, solve_dispatch
from .distributions import (
    EmpiricalModel,
    ErrorMoments,
    GaussianModel,
    RobustModel,
    VersatileModel,
    fit_versatile_mle,
)
from .scenarios import NetLoadModel, load_system_csv, synth_test_system

__all__ = [
    "CostPolynomial",
    "DispatchSolution",
    "EmpiricalModel",
    "ErrorMoments",
    "FleetCurve",
    "GaussianModel",
    "NetLoadModel",
    "RobustModel",
    "Segment",
    "StorageSpec",
    "SystemSpec",
    "VersatileModel",
    "build_dispatch",
    "fit_versatile_mle",
    "load_system_csv",
    "solve_dispatch",
    "synth_test_system",
]
