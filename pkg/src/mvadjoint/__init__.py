"""Adjoint-based impact evaluation of manufacturing variations on a 2D transonic bump channel."""
from .adjoint import (AdjointSolution, ImpactRecord, SensitivityField, SurfaceSensitivity,
                      mesh_sensitivities, predict_delta, solve_adjoint, surface_sensitivities)
from .errors import MVAdjointError
from .estimators import AdjointImpactEstimator, ScanDeviationMapper
from .euler import FlowConfig, FlowSolution, solve_primal
from .geometry import BladeParams, SurfacePolyline, VariationSpec, apply_variation, generate_profile, \
    variation_suite
from .grid import StructuredGrid, compute_metrics, generate_grid, read_mesh, write_mesh
from .morph import DeformationField, MorphOperator, clamp, morph_mesh
from .mva import PerturbationModel, ScanSurface, deviation_analysis, map_deviations, synthesize_scan
from .tape import Tape, TracedArray, record, reverse_sweep

__version__ = "0.1.0"

__all__ = [
    "AdjointImpactEstimator", "AdjointSolution", "BladeParams", "DeformationField", "FlowConfig",
    "FlowSolution", "ImpactRecord", "MVAdjointError", "MorphOperator", "PerturbationModel",
    "ScanDeviationMapper", "ScanSurface", "SensitivityField", "StructuredGrid", "SurfacePolyline",
    "SurfaceSensitivity", "Tape", "TracedArray", "VariationSpec", "apply_variation", "clamp",
    "compute_metrics", "deviation_analysis", "generate_grid", "generate_profile", "map_deviations",
    "mesh_sensitivities", "morph_mesh", "predict_delta", "read_mesh", "record", "reverse_sweep",
    "solve_adjoint", "solve_primal", "surface_sensitivities", "synthesize_scan", "variation_suite",
    "write_mesh",
]
