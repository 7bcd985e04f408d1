"""Surface-to-volume mesh deformation by a fixed-count Jacobi Laplace solve.

Every boundary node is Dirichlet: bump-surface nodes carry the prescribed
displacement, all other boundary nodes stay put.  Interior nodes receive
the discrete harmonic extension (uniform graph weights).  Because the
iteration count is fixed per grid and the start is zero, the operator is
exactly linear and its transpose is the same sweep run backwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, PreconditionError
from .grid import compute_metrics

DEFAULT_CLAMP = (0.01, 0.99)


@dataclass(eq=False)
class DeformationField:
    """Displacement vectors at the bump-surface nodes (leading edge first)."""

    displacement: np.ndarray
    arc_fraction: np.ndarray
    clamp_range: tuple = DEFAULT_CLAMP
    flags: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.array(self.displacement, dtype=np.float64)
        a = np.array(self.arc_fraction, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 2 or len(d) != len(a):
            raise DimensionMismatch(f"displacement {d.shape} does not match {len(a)} arc fractions")
        lo, hi = self.clamp_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise PreconditionError(f"invalid clamp range {self.clamp_range}")
        self.displacement = d
        self.arc_fraction = a
        self.clamp_range = (float(lo), float(hi))
        if self.flags is None:
            self.flags = np.zeros(len(d), dtype=bool)

    @property
    def n_nodes(self):
        return len(self.displacement)

    @property
    def max_abs(self):
        return float(np.hypot(*self.displacement.T).max()) if self.n_nodes else 0.0

    def scaled(self, alpha):
        return DeformationField(alpha * self.displacement, self.arc_fraction, self.clamp_range,
                                self.flags.copy())

    @classmethod
    def zeros(cls, grid, clamp_range=DEFAULT_CLAMP):
        from .geometry import arc_fractions

        n = len(grid.surface_indices)
        return cls(np.zeros((n, 2)), arc_fractions(grid.surface_points), clamp_range)

    @classmethod
    def from_points(cls, grid, new_points, clamp_range=(0.0, 1.0)):
        """Node-wise displacement taking the grid's surface onto ``new_points``."""
        from .geometry import arc_fractions

        base = grid.surface_points
        new_points = np.asarray(new_points, dtype=np.float64)
        if new_points.shape != base.shape:
            raise DimensionMismatch(f"{new_points.shape} surface points for a {base.shape} surface")
        return cls(new_points - base, arc_fractions(base), clamp_range)


def clamp(d):
    """Zero the displacement outside ``d.clamp_range`` (which leaves a step if d is nonzero there)."""
    lo, hi = d.clamp_range
    out = d.displacement.copy()
    outside = (d.arc_fraction < lo) | (d.arc_fraction > hi)
    out[outside] = 0.0
    return DeformationField(out, d.arc_fraction, d.clamp_range, d.flags.copy())


def jacobi_iterations(ni, nj, tol=1e-10):
    """Sweeps needed for the Jacobi error to fall by ``tol`` on an ni x nj node graph."""
    rho = 0.5 * (math.cos(math.pi / (ni - 1)) + math.cos(math.pi / (nj - 1)))
    return int(math.ceil(math.log(tol) / math.log(rho)))


class MorphOperator:
    """Linear map M from surface displacements (n_s, 2) to node displacements (2, ni, nj)."""

    def __init__(self, grid, iterations=None, tol=1e-10):
        self.shape = (grid.ni, grid.nj)
        self.surface = np.array(grid.surface_indices)
        self.iterations = jacobi_iterations(grid.ni, grid.nj, tol) if iterations is None else int(iterations)
        if self.iterations < 0:
            raise PreconditionError("iteration count must be >= 0")

    @property
    def n_surface(self):
        return len(self.surface)

    def _embed(self, d):
        d = np.asarray(getattr(d, "displacement", d), dtype=np.float64)
        if d.shape != (self.n_surface, 2):
            raise DimensionMismatch(f"expected ({self.n_surface}, 2) surface displacements, got {d.shape}")
        u = np.zeros((2,) + self.shape)
        u[:, self.surface, 0] = d.T
        return u

    def apply(self, d):
        u = self._embed(d)
        for _ in range(self.iterations):
            u[:, 1:-1, 1:-1] = 0.25 * (u[:, 2:, 1:-1] + u[:, :-2, 1:-1] + u[:, 1:-1, 2:] + u[:, 1:-1, :-2])
        return u

    def transpose(self, w):
        w = np.array(w, dtype=np.float64)
        if w.shape != (2,) + self.shape:
            raise DimensionMismatch(f"expected {(2,) + self.shape} node field, got {w.shape}")
        for _ in range(self.iterations):
            q = 0.25 * w[:, 1:-1, 1:-1]
            w[:, 1:-1, 1:-1] = 0.0
            w[:, 2:, 1:-1] += q
            w[:, :-2, 1:-1] += q
            w[:, 1:-1, 2:] += q
            w[:, 1:-1, :-2] += q
        return w[:, self.surface, 0].T.copy()


def operator_apply(M, d):
    return M.apply(d)


def operator_transpose(M, w):
    return M.transpose(w)


def morph_mesh(grid, d, operator=None):
    """Deformed copy of ``grid``; raises NegativeVolume if any cell folds."""
    M = MorphOperator(grid) if operator is None else operator
    disp = np.asarray(getattr(d, "displacement", d), dtype=np.float64)
    if not disp.any():
        return grid.with_coords(grid.x.copy(), grid.y.copy())
    u = M.apply(disp)
    new = grid.with_coords(grid.x + u[0], grid.y + u[1])
    compute_metrics(new)
    return new
