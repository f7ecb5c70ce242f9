"""Bathymetry reconstruction from free-surface observations of shallow-water flow."""

from .core_model import (GRAVITY, BathymetryField, BoundaryForcing, ConfigError, FlowField,
                         FlowHistory, Grid, Law, ScenarioConfig, build_grid, sample_bed)
from .forward_solver import ForwardError, run_forward
from .surface_lab import NoiseSpec, SmootherSpec, SurfaceSnapshot, add_noise, extract_snapshot, smooth_spline
from .inverse_core import (DegenerateFlowError, NondegeneracyWarning, ReconstructionResult,
                           SteadyInversionError, reconstruct, steady_analytic, steady_discharge_free)
from .flow_diagnostics import (HypothesisError, check_corollary_condition, check_theorem_condition,
                               error_norms, estimate_wave_bounds, stability_budget)

__version__ = "0.1.0"
