"""Synthetic surface scans and normal-distance deviation measurement.

A scan is the nominal profile, resampled more densely, pushed along its
normals by a smooth Gaussian random field (squared-exponential covariance
in arc length) plus independent measurement noise.  Deviations are read
back at measurement nodes by intersecting each node's normal ray with the
scan polyline and are then interpolated onto the CFD surface nodes.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CovarianceNotPD, DimensionMismatch, NoIntersection, PreconditionError
from .geometry import SurfacePolyline, arc_fractions, polyline_normals
from .morph import DEFAULT_CLAMP, DeformationField
from .stl import read_stl_triangles, ribbon_polyline, ribbon_triangles, write_stl

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerturbationModel:
    sigma_field: float = 0.002
    correlation_length: float = 0.2
    sigma_meas: float = 2e-5
    seed: int = 0
    chord: float = 1.0

    def __post_init__(self):
        if self.sigma_field < 0.0 or self.sigma_meas < 0.0:
            raise PreconditionError("standard deviations must be non-negative")
        if not self.correlation_length > 0.0 or not self.chord > 0.0:
            raise PreconditionError("correlation length and chord must be positive")
        if self.sigma_field > 0.0 and self.sigma_meas > 0.1 * self.sigma_field:
            raise PreconditionError(
                f"sigma_meas={self.sigma_meas:g} must be at least ten times below "
                f"sigma_field={self.sigma_field:g}")

    def with_seed(self, seed):
        return PerturbationModel(self.sigma_field, self.correlation_length, self.sigma_meas, seed,
                                 self.chord)

    @property
    def expected_abs_deviation(self):
        """E|f + noise| for the zero-mean normal marginal."""
        s = np.hypot(self.sigma_field, self.sigma_meas) * self.chord
        return float(s * np.sqrt(2.0 / np.pi))


@dataclass(eq=False)
class ScanSurface:
    points: np.ndarray
    sigma_meas: float = 0.0
    seed: int | None = None
    field: np.ndarray = None  # true smooth normal displacement at the points (synthetic scans)
    triangles: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise PreconditionError("scan points must be an (n, 2) array with n >= 2")

    @property
    def n_points(self):
        return len(self.points)

    @property
    def arc_fraction(self):
        return arc_fractions(self.points)


def refine_polyline(points, factor):
    """Insert ``factor - 1`` equally spaced points into every segment (nodes kept)."""
    p = np.asarray(points, dtype=np.float64)
    if factor < 1:
        raise PreconditionError("refinement factor must be >= 1")
    t = np.arange(factor) / factor
    seg = p[:-1, None, :] + t[None, :, None] * (p[1:] - p[:-1])[:, None, :]
    return np.vstack([seg.reshape(-1, 2), p[-1:]])


def correlation_factor(s, length):
    """Lower Cholesky factor of exp(-(s_i - s_j)^2 / (2 l^2))."""
    d = s[:, None] - s[None, :]
    C = np.exp(-0.5 * (d / length) ** 2)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(C + 1e-12 * np.eye(len(s)))
    except np.linalg.LinAlgError:
        raise CovarianceNotPD(f"covariance of {len(s)} points not positive definite "
                              f"even with 1e-12 nugget") from None


def correlated_field(s, model, rng, size=None):
    """Smooth random normal displacement(s) at arc-length positions ``s``."""
    L = correlation_factor(np.asarray(s, dtype=np.float64), model.correlation_length * model.chord)
    z = rng.standard_normal(len(s) if size is None else (len(s), size))
    return model.sigma_field * model.chord * (L @ z)


def synthesize_scan(baseline, model, refine=4):
    """Synthetic scan of ``baseline`` (a SurfacePolyline); deterministic per ``model.seed``."""
    pts = refine_polyline(baseline.points, refine)
    n = polyline_normals(pts)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    rng = np.random.default_rng(model.seed)
    f = correlated_field(s, model, rng)
    noise = model.sigma_meas * model.chord * rng.standard_normal(len(pts))
    return ScanSurface(pts + (f + noise)[:, None] * n, model.sigma_meas * model.chord, model.seed, f)


# ---------------------------------------------------------------------------
# STL

def write_scan_stl(scan, path, binary=False, depth=1.0):
    write_stl(ribbon_triangles(scan.points, depth), path, binary=binary)


def read_stl(path):
    """Scan surface from an extruded-ribbon STL (ASCII or binary)."""
    tri = read_stl_triangles(path)
    return ScanSurface(ribbon_polyline(tri), triangles=tri)


def write_stl_surface(scan_or_profile, path, binary=False):
    write_scan_stl(scan_or_profile, path, binary)


# ---------------------------------------------------------------------------
# deviation analysis

@dataclass(eq=False)
class DeviationResult:
    deviation: np.ndarray
    arc_fraction: np.ndarray
    flags: np.ndarray          # True where the ray found no intersection (projection used)
    ambiguous: np.ndarray = field(default=None)  # two intersections within 2 sigma_meas

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "arc_fraction", "deviation", "flag"])
            for k, (a, d, f) in enumerate(zip(self.arc_fraction, self.deviation, self.flags)):
                w.writerow([k, repr(float(a)), repr(float(d)), int(f)])


def _ray_hits(p, n, a, b):
    """Signed ray parameters t where p + t n crosses the segments a->b (nan if none)."""
    e = b - a
    den = n[0] * e[:, 1] - n[1] * e[:, 0]
    w = a - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / den
        u = (w[:, 0] * n[1] - w[:, 1] * n[0]) / den
    ok = (den != 0.0) & (u >= -1e-12) & (u <= 1.0 + 1e-12)
    return np.where(ok, t, np.nan)


def _project(p, a, b):
    e = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, e) / np.einsum("ij,ij->i", e, e), 0.0, 1.0)
    q = a + t[:, None] * e
    k = int(np.argmin(np.hypot(*(q - p).T)))
    return q[k]


def deviation_analysis(fem_nodes, scan, search_radius=0.1, chord=1.0):
    """Signed normal distance (positive outward) from each node to the scan polyline."""
    P = fem_nodes.points
    N = fem_nodes.normals
    a, b = scan.points[:-1], scan.points[1:]
    R = search_radius * chord
    dev = np.zeros(len(P))
    flags = np.zeros(len(P), dtype=bool)
    amb = np.zeros(len(P), dtype=bool)
    for k, (p, n) in enumerate(zip(P, N)):
        t = _ray_hits(p, n, a, b)
        t = t[np.isfinite(t) & (np.abs(t) <= R)]
        if len(t) == 0:
            q = _project(p[None, :], a, b)
            dev[k] = float(np.dot(q - p, n))
            flags[k] = True
            warnings.warn(str(NoIntersection(f"node {k}: no scan intersection within {R:g}; "
                                             f"nearest-point projection used")), stacklevel=2)
            continue
        order = np.argsort(np.abs(t))
        dev[k] = t[order[0]]
        if len(t) > 1:
            second = t[order[1]]
            if abs(second - t[order[0]]) > 1e-12 and abs(second - t[order[0]]) <= 2.0 * scan.sigma_meas:
                amb[k] = True
    return DeviationResult(dev, fem_nodes.arc_fraction, flags, amb)


def brute_force_distance(fem_nodes, scan, samples_per_segment=200):
    """Signed nearest distance from each node to a densely sampled scan (test oracle)."""
    dense = refine_polyline(scan.points, samples_per_segment)
    out = np.empty(fem_nodes.n_points)
    for k, (p, n) in enumerate(zip(fem_nodes.points, fem_nodes.normals)):
        d = dense - p
        j = int(np.argmin(np.hypot(d[:, 0], d[:, 1])))
        out[k] = np.sign(np.dot(d[j], n)) * np.hypot(*d[j])
    return out


def map_deviations(deviation, fem_arc, cfd_arc, cfd_normals, clamp_range=DEFAULT_CLAMP):
    """Interpolate normal deviations in arc fraction and turn them into displacement vectors.

    CFD nodes outside the measured arc range take the end values and are flagged.
    """
    deviation = np.asarray(deviation, dtype=np.float64)
    fem_arc = np.asarray(fem_arc, dtype=np.float64)
    cfd_arc = np.asarray(cfd_arc, dtype=np.float64)
    cfd_normals = np.asarray(cfd_normals, dtype=np.float64)
    if deviation.shape != fem_arc.shape:
        raise DimensionMismatch(f"{len(deviation)} deviations for {len(fem_arc)} arc fractions")
    if cfd_normals.shape != (len(cfd_arc), 2):
        raise DimensionMismatch("cfd normals must be (n_cfd, 2)")
    if np.any(np.diff(fem_arc) <= 0.0):
        raise PreconditionError("measurement arc fractions must increase strictly")
    delta = np.interp(cfd_arc, fem_arc, deviation)
    flags = (cfd_arc < fem_arc[0] - 1e-12) | (cfd_arc > fem_arc[-1] + 1e-12)
    if flags.any():
        logger.warning("%d CFD nodes outside the measured range; end values used", int(flags.sum()))
    return DeformationField(delta[:, None] * cfd_normals, cfd_arc, clamp_range, flags)


def scan_deformation(grid, scan, fem_nodes=None, clamp_range=DEFAULT_CLAMP):
    """Full measurement chain for one scan: deviations at FEM nodes, mapped to the grid surface."""
    cfd = SurfacePolyline(grid.surface_points)
    fem = cfd if fem_nodes is None else fem_nodes
    res = deviation_analysis(fem, scan)
    d = map_deviations(res.deviation, fem.arc_fraction, cfd.arc_fraction, cfd.normals, clamp_range)
    return d, res
