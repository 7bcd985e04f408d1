"""Discrete adjoint solutions, mesh/surface sensitivities and ΔF predictions.

Two variants share one fixed-point iteration

    lam <- lam + M^-T (dJ/dU - A^T lam)

where ``M`` is the implicit pseudo-time operator of the converged primal
(the preconditioner the primal iteration applies) and ``A`` is the state
Jacobian of the residual:

* ``AD``: ``A^T lam`` is a reverse sweep over a taped residual evaluation,
  so the adjoint is the exact transpose of the discrete scheme.
* ``HD``: ``A`` is assembled from one-sided finite differences of the
  residual with the MUSCL increments and the Roe dissipation coefficients
  frozen at the converged state; ``dJ/dU`` is also differenced.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import euler
from .errors import (DegenerateBaselineDelta, DimensionMismatch, NotConverged, PreconditionError,
                     PrimalNotConverged)
from .grid import compute_metrics
from .sparsity import ad_jacobian, fd_jacobian
from .tape import Tape

logger = logging.getLogger(__name__)

VARIANTS = ("AD", "HD")


@dataclass(eq=False)
class AdjointSolution:
    lam: np.ndarray
    objective_id: str
    variant: str
    residual_history: np.ndarray
    converged: bool
    iterations_used: int = 0
    objective_value: float = float("nan")
    status: str = "converged"
    wall_time: float = 0.0
    tape_bytes: int = 0

    def save(self, path):
        np.savez(path, lam=self.lam, residual_history=self.residual_history,
                 converged=self.converged, objective_id=self.objective_id, variant=self.variant,
                 status=self.status, objective_value=self.objective_value)

    def write_history_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,l1_adjoint_residual\n")
            for k, r in enumerate(self.residual_history):
                fh.write(f"{k},{r:.17g}\n")


@dataclass(eq=False)
class SensitivityField:
    """dJ/dX per grid node, shape (2, ni, nj)."""

    dJ_dX: np.ndarray
    objective_id: str
    variant: str = "AD"

    def directional(self, dX):
        dX = np.asarray(dX, dtype=np.float64)
        if dX.shape != self.dJ_dX.shape:
            raise DimensionMismatch(f"displacement shape {dX.shape} != {self.dJ_dX.shape}")
        return float(np.sum(self.dJ_dX * dX))


@dataclass(eq=False)
class SurfaceSensitivity:
    """Per surface node: gradient w.r.t. the node displacement vector and its normal part."""

    g: np.ndarray
    normals: np.ndarray
    arc_fraction: np.ndarray
    objective_id: str = ""

    @property
    def g_normal(self):
        return np.einsum("ij,ij->i", self.g, self.normals)

    @property
    def n_nodes(self):
        return len(self.g)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arc_fraction", "g_normal", "g_x", "g_y"])
            for a, gn, gv in zip(self.arc_fraction, self.g_normal, self.g):
                w.writerow([repr(float(a)), repr(float(gn)), repr(float(gv[0])), repr(float(gv[1]))])


@dataclass
class ImpactRecord:
    sample_id: str
    objective_id: str
    dF_adjoint: float
    dF_nonlinear: float
    deviation_pct: float
    variant: str = "AD"
    status: str = "ok"

    FIELDS = ("sample_id", "objective_id", "variant", "dF_adjoint", "dF_nonlinear", "deviation_pct",
              "status")

    def row(self):
        return {k: getattr(self, k) for k in self.FIELDS}


# ---------------------------------------------------------------------------
# taping

def record_residual_objective(grid, state, config, objective):
    """Tape one residual evaluation and the objective with inputs (x, y, U)."""
    tape = Tape()
    xt = tape.variable(grid.x)
    yt = tape.variable(grid.y)
    Ut = tape.variable(state)
    R = euler.residual(xt, yt, Ut, config)
    J = euler.evaluate_objective(objective, Ut, xt, yt, config)
    tape.register_output(R)
    tape.register_output(J)
    return tape, (xt, yt, Ut), float(J.value)


def _objective_gradient_fd(grid, U, config, objective, rel_step=1e-7):
    """dJ/dU by one-sided differences over the station cells the objective reads."""
    f = lambda V: float(euler.evaluate_objective(objective, V, grid.x, grid.y, config))
    J0 = f(U)
    g = np.zeros_like(U)
    mag = np.abs(U).reshape(4, -1).max(axis=1)
    scale = np.maximum(mag, 1e-3 * mag.max())
    for i in (0, U.shape[1] - 1):
        for e in range(4):
            h = rel_step * scale[e]
            for j in range(U.shape[2]):
                V = U.copy()
                V[e, i, j] += h
                g[e, i, j] = (f(V) - J0) / h
    return g, J0


def _check_primal(primal):
    if not primal.converged:
        raise PrimalNotConverged("adjoint requires a converged primal solution")


def _fixed_point(g, apply_AT, lu, drop_orders, max_iter, stall_window):
    """Run the preconditioned transpose iteration; returns (lam, history, converged, status)."""
    lam = np.zeros_like(g)
    hist = []
    r0 = float(np.abs(g).mean())
    if r0 == 0.0:
        return lam, np.array([0.0]), True, "converged"
    target = r0 * 10.0 ** (-drop_orders)
    res = g
    for it in range(max_iter + 1):
        if it > 0:
            res = g - apply_AT(lam)
        r = float(np.abs(res).mean())
        hist.append(r)
        if not np.isfinite(r):
            return lam, np.array(hist), False, "diverged"
        if r <= target:
            return lam, np.array(hist), True, "converged"
        if it == max_iter:
            break
        lam = lam + lu.solve(res.ravel(), trans="T").reshape(g.shape)
    h = np.array(hist)
    w = min(stall_window, len(h) - 1)
    stalled = w > 0 and np.log10(h[-w - 1:].max() / h[-w - 1:].min()) < 0.1 * w / stall_window
    return lam, h, False, "stagnated" if stalled else "max_iter"


def solve_adjoint_ad(primal, grid=None, objective="MassFlow", drop_orders=5.0, max_iter=1000,
                     raise_on_fail=False):
    """Adjoint by reverse sweeps over the taped residual (exact discrete transpose)."""
    _check_primal(primal)
    t0 = time.perf_counter()
    grid = primal.grid if grid is None else grid
    config, U = primal.config, primal.state
    tape, (xt, yt, Ut), J = record_residual_objective(grid, U, config, objective)
    zeroR = np.zeros_like(U)
    g = tape.gradient([zeroR, 1.0], wrt=[Ut])[0]
    lu = euler.implicit_operator(U, grid.x, grid.y, compute_metrics(grid), config, config.cfl_max)
    apply_AT = lambda lam: tape.gradient([lam, 0.0], wrt=[Ut])[0]
    lam, hist, ok, status = _fixed_point(g, apply_AT, lu, drop_orders, max_iter, 100)
    sol = AdjointSolution(lam, objective, "AD", hist, ok, len(hist) - 1, J, status,
                          time.perf_counter() - t0, tape.nbytes)
    logger.info("AD adjoint %s: %s after %d iterations", objective, status, sol.iterations_used)
    if not ok and raise_on_fail:
        raise NotConverged(f"AD adjoint for {objective} {status}", sol)
    return sol


def hd_jacobian(grid, U, config, frozen=True):
    """Finite-difference state Jacobian, optionally with frozen coefficients."""
    x, y = grid.x, grid.y
    if frozen:
        coeffs = euler.freeze_coefficients(x, y, U, config)
        return fd_jacobian(lambda V: euler.residual(x, y, V, config, frozen=coeffs), U, radius=1)
    radius = 1 if config.order == 1 else 2
    return fd_jacobian(lambda V: euler.residual(x, y, V, config), U, radius=radius)


def solve_adjoint_hd(primal, grid=None, objective="MassFlow", drop_orders=5.0, max_iter=1000,
                     frozen=True, raise_on_fail=False):
    """Adjoint with a finite-difference, frozen-coefficient Jacobian.

    Stagnation is recorded in ``status`` and not treated as an error unless
    ``raise_on_fail`` is given.
    """
    _check_primal(primal)
    t0 = time.perf_counter()
    grid = primal.grid if grid is None else grid
    config, U = primal.config, primal.state
    A = hd_jacobian(grid, U, config, frozen)
    AT = A.T.tocsr()
    g, J = _objective_gradient_fd(grid, U, config, objective)
    lu = euler.implicit_operator(U, grid.x, grid.y, compute_metrics(grid), config, config.cfl_max)
    apply_AT = lambda lam: (AT @ lam.ravel()).reshape(lam.shape)
    lam, hist, ok, status = _fixed_point(g, apply_AT, lu, drop_orders, max_iter, 100)
    sol = AdjointSolution(lam, objective, "HD", hist, ok, len(hist) - 1, J, status,
                          time.perf_counter() - t0, A.data.nbytes + A.indices.nbytes)
    logger.info("HD adjoint %s: %s after %d iterations", objective, status, sol.iterations_used)
    if not ok and raise_on_fail:
        raise NotConverged(f"HD adjoint for {objective} {status}", sol)
    return sol


def solve_adjoint(primal, objective="MassFlow", variant="AD", **kw):
    if variant == "AD":
        return solve_adjoint_ad(primal, objective=objective, **kw)
    if variant == "HD":
        return solve_adjoint_hd(primal, objective=objective, **kw)
    raise PreconditionError(f"unknown adjoint variant {variant!r}; choose from {VARIANTS}")


def direct_adjoint(primal, objective="MassFlow"):
    """Adjoint from a direct sparse solve of the assembled transpose system (test oracle)."""
    from scipy.sparse.linalg import spsolve

    grid, config, U = primal.grid, primal.config, primal.state
    tape, (xt, yt, Ut), _ = record_residual_objective(grid, U, config, objective)
    g = tape.gradient([np.zeros_like(U), 1.0], wrt=[Ut])[0]
    A = ad_jacobian(lambda V: euler.residual(grid.x, grid.y, V, config), U, radius=2)
    return spsolve(A.T.tocsc(), g.ravel()).reshape(U.shape)


# ---------------------------------------------------------------------------
# sensitivities and predictions

def mesh_sensitivities(primal, adjoint, grid=None):
    """dJ/dX = dJ/dX|_U - lam^T dR/dX from one reverse sweep with node coordinates as inputs."""
    grid = primal.grid if grid is None else grid
    if adjoint.variant == "HD" and not adjoint.converged:
        logger.warning("using non-converged HD adjoint (%s) for sensitivities", adjoint.status)
    if adjoint.lam.shape != primal.state.shape:
        raise DimensionMismatch(f"adjoint shape {adjoint.lam.shape} != state {primal.state.shape}")
    tape, (xt, yt, Ut), _ = record_residual_objective(grid, primal.state, primal.config,
                                                      adjoint.objective_id)
    gx, gy = tape.gradient([-adjoint.lam, 1.0], wrt=[xt, yt])
    return SensitivityField(np.stack([gx, gy]), adjoint.objective_id, adjoint.variant)


def surface_sensitivities(field, grid, operator=None):
    """Surface map g = M^T dJ/dX; identity ``operator`` keeps the surface rows only."""
    if field.dJ_dX.shape != (2, grid.ni, grid.nj):
        raise DimensionMismatch(f"sensitivity shape {field.dJ_dX.shape} does not fit grid "
                                f"({grid.ni}, {grid.nj})")
    surf = grid.surface_indices
    if operator is None:
        g = field.dJ_dX[:, surf, 0].T.copy()
    else:
        if operator.shape != (grid.ni, grid.nj) or not np.array_equal(operator.surface, surf):
            raise DimensionMismatch("morph operator does not belong to this grid")
        g = operator.transpose(field.dJ_dX)
    pts = grid.surface_points
    from .geometry import SurfacePolyline

    poly = SurfacePolyline(pts)
    return SurfaceSensitivity(g, poly.normals, poly.arc_fraction, field.objective_id)


def predict_delta(surface_map, deformation):
    """ΔF_adjoint = sum_i g_i . d_i over the surface nodes."""
    d = getattr(deformation, "displacement", deformation)
    d = np.asarray(d, dtype=np.float64)
    if d.shape != surface_map.g.shape:
        raise DimensionMismatch(f"deformation has {d.shape}, sensitivity map has {surface_map.g.shape}")
    return float(np.sum(surface_map.g * d))


def deviation_pct(dF_nonlinear, dF_adjoint, scale=1.0, eps=1e-14):
    """(ΔF_nonlinear - ΔF_adjoint) / ΔF_nonlinear in percent."""
    if abs(dF_nonlinear) < eps * abs(scale) or dF_nonlinear == 0.0:
        raise DegenerateBaselineDelta(
            f"|dF_nonlinear| = {abs(dF_nonlinear):.3e} below {eps:g} x objective scale")
    return (dF_nonlinear - dF_adjoint) / dF_nonlinear * 100.0


def impact_record(sample_id, objective_id, dF_nonlinear, dF_adjoint, scale=1.0, variant="AD",
                  eps=1e-14):
    try:
        dev = deviation_pct(dF_nonlinear, dF_adjoint, scale, eps)
        status = "ok"
    except DegenerateBaselineDelta:
        dev, status = float("nan"), "degenerate"
    return ImpactRecord(str(sample_id), objective_id, float(dF_adjoint), float(dF_nonlinear), dev,
                        variant, status)


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ImpactRecord.FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def read_records_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ImpactRecord(row["sample_id"], row["objective_id"], float(row["dF_adjoint"]),
                                    float(row["dF_nonlinear"]), float(row["deviation_pct"]),
                                    row.get("variant", "AD"), row.get("status", "ok")))
    return out
