"""scikit-learn style wrappers around the measurement chain and the adjoint predictor.

``ScanDeviationMapper`` turns normal deviations measured at FEM nodes into
clamped normal displacements at the CFD surface nodes.  ``AdjointImpactEstimator``
solves the baseline flow and adjoint in ``fit`` and predicts objective changes
for rows of surface normal displacements.  Both accept plain 2D arrays.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import adjoint as adj
from .errors import DimensionMismatch
from .euler import FlowConfig, solve_primal
from .geometry import BladeParams, SurfacePolyline, generate_profile
from .grid import generate_grid
from .morph import DEFAULT_CLAMP, DeformationField, MorphOperator, clamp, morph_mesh
from .mva import map_deviations


def _baseline_grid(est):
    params = BladeParams(stagger_deg=est.stagger_deg, max_thickness=est.max_thickness,
                         bump_position=est.bump_position)
    return generate_grid(generate_profile(params, est.n_surface), est.ni, est.nj)


class ScanDeviationMapper(TransformerMixin, BaseEstimator):
    """Map FEM-node deviations (n_samples, n_fem) to CFD-node normal displacements (n_samples, n_surface)."""

    def __init__(self, fem_arc=None, n_surface=41, stagger_deg=5.0, max_thickness=0.10,
                 bump_position=0.4, clamp_range=DEFAULT_CLAMP):
        self.fem_arc = fem_arc
        self.n_surface = n_surface
        self.stagger_deg = stagger_deg
        self.max_thickness = max_thickness
        self.bump_position = bump_position
        self.clamp_range = clamp_range

    def fit(self, X, y=None):
        X = check_array(X)
        params = BladeParams(stagger_deg=self.stagger_deg, max_thickness=self.max_thickness,
                             bump_position=self.bump_position)
        cfd = generate_profile(params, self.n_surface)
        if self.fem_arc is None:
            self.fem_arc_ = generate_profile(params, X.shape[1]).arc_fraction
        else:
            self.fem_arc_ = np.asarray(self.fem_arc, dtype=np.float64)
        if len(self.fem_arc_) != X.shape[1]:
            raise DimensionMismatch(f"{X.shape[1]} columns for {len(self.fem_arc_)} FEM nodes")
        self.cfd_arc_ = cfd.arc_fraction
        self.cfd_normals_ = cfd.normals
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "fem_arc_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        out = np.empty((len(X), len(self.cfd_arc_)))
        for k, row in enumerate(X):
            d = clamp(map_deviations(row, self.fem_arc_, self.cfd_arc_, self.cfd_normals_,
                                     tuple(self.clamp_range)))
            out[k] = np.einsum("ij,ij->i", d.displacement, self.cfd_normals_)
        return out


class AdjointImpactEstimator(RegressorMixin, BaseEstimator):
    """Linear adjoint prediction of an objective change from surface normal displacements.

    ``fit`` ignores ``X`` beyond its width check: the model is the baseline
    surface sensitivity, not a regression.  ``nonlinear`` re-solves the flow on
    the morphed mesh for comparison.
    """

    def __init__(self, objective="MassFlow", variant="AD", ni=121, nj=41, n_surface=41,
                 stagger_deg=5.0, max_thickness=0.10, bump_position=0.4, p_exit=0.70,
                 drop_orders=5.0, max_iter=1000):
        self.objective = objective
        self.variant = variant
        self.ni = ni
        self.nj = nj
        self.n_surface = n_surface
        self.stagger_deg = stagger_deg
        self.max_thickness = max_thickness
        self.bump_position = bump_position
        self.p_exit = p_exit
        self.drop_orders = drop_orders
        self.max_iter = max_iter

    def fit(self, X=None, y=None):
        if X is not None:
            X = check_array(X)
            if X.shape[1] != self.n_surface:
                raise DimensionMismatch(f"expected {self.n_surface} columns, got {X.shape[1]}")
        self.grid_ = _baseline_grid(self)
        self.primal_ = solve_primal(self.grid_, FlowConfig(p_exit=self.p_exit), raise_on_fail=True)
        self.operator_ = MorphOperator(self.grid_)
        self.adjoint_ = adj.solve_adjoint(self.primal_, self.objective, self.variant,
                                          drop_orders=self.drop_orders, max_iter=self.max_iter)
        field = adj.mesh_sensitivities(self.primal_, self.adjoint_)
        self.sensitivity_ = adj.surface_sensitivities(field, self.grid_, self.operator_)
        self.baseline_value_ = self.primal_.objective(self.objective)
        self.n_features_in_ = self.n_surface
        return self

    def _deformation(self, row):
        return DeformationField(row[:, None] * self.sensitivity_.normals, self.sensitivity_.arc_fraction,
                                (0.0, 1.0))

    def predict(self, X):
        check_is_fitted(self, "sensitivity_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X @ self.sensitivity_.g_normal

    def nonlinear(self, X):
        """ΔF from full re-solves on the morphed meshes (slow; the validation reference)."""
        check_is_fitted(self, "sensitivity_")
        X = check_array(X)
        out = np.empty(len(X))
        for k, row in enumerate(X):
            g = morph_mesh(self.grid_, self._deformation(row), self.operator_)
            sol = solve_primal(g, self.primal_.config, initial=self.primal_.state,
                               reference_residual=self.primal_.residual_history[0], raise_on_fail=True)
            out[k] = sol.objective(self.objective) - self.baseline_value_
        return out

    def surface_normals(self):
        check_is_fitted(self, "sensitivity_")
        return SurfacePolyline(self.grid_.surface_points).normals
