"""Blade-bump profile generation and parameter variations."""
from __future__ import annotations

import csv
import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, SelfIntersectionError

XI_VALUES = (0.90, 0.95, 0.98, 1.02, 1.05, 1.10)

# lower-wall placement of the bump and channel extent, in chords
LEADING_EDGE_X = 1.0
CHANNEL_LENGTH = 3.0
CHANNEL_HEIGHT = 1.0


class Parameter(str, enum.Enum):
    STAGGER = "Stagger"
    THICKNESS = "Thickness"


_FIELD_OF = {Parameter.STAGGER: "stagger_deg", Parameter.THICKNESS: "max_thickness"}


@dataclass(frozen=True)
class BladeParams:
    stagger_deg: float = 5.0
    max_thickness: float = 0.10
    chord: float = 1.0
    bump_position: float = 0.4

    def __post_init__(self):
        if not self.max_thickness >= 0.0:
            raise PreconditionError(f"max_thickness must be >= 0, got {self.max_thickness}")
        if not 0.0 < self.bump_position < 1.0:
            raise PreconditionError(f"bump_position must lie in (0, 1), got {self.bump_position}")
        if not self.chord > 0.0:
            raise PreconditionError(f"chord must be positive, got {self.chord}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class VariationSpec:
    parameter_id: Parameter
    xi: float
    section_id: str = "S1"

    def __post_init__(self):
        object.__setattr__(self, "parameter_id", Parameter(self.parameter_id))
        if not self.xi > 0.0:
            raise PreconditionError(f"xi must be positive, got {self.xi}")

    @property
    def label(self):
        return f"{self.section_id}-{self.parameter_id.value}-{self.xi:.2f}"


@dataclass(frozen=True, eq=False)
class SurfacePolyline:
    """Ordered wetted-surface nodes, leading edge first."""

    points: np.ndarray
    normals: np.ndarray = field(default=None)
    arc_fraction: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise PreconditionError("points must be an (n, 2) array with n >= 2")
        object.__setattr__(self, "points", pts)
        if self.normals is None:
            object.__setattr__(self, "normals", polyline_normals(pts))
        if self.arc_fraction is None:
            object.__setattr__(self, "arc_fraction", arc_fractions(pts))

    @property
    def n_points(self):
        return len(self.points)

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def y(self):
        return self.points[:, 1]


def arc_fractions(points):
    seg = np.hypot(*np.diff(points, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0.0:
        raise PreconditionError("degenerate polyline with zero length")
    return s / s[-1]


def polyline_normals(points):
    """Unit normals pointing to the left of the direction of travel.

    Interior nodes use the chord between their two neighbours, which is
    exactly perpendicular to the radius on a uniformly sampled circular arc.
    """
    t = np.empty_like(points)
    t[1:-1] = points[2:] - points[:-2]
    t[0] = points[1] - points[0]
    t[-1] = points[-1] - points[-2]
    t /= np.hypot(t[:, 0], t[:, 1])[:, None]
    return np.column_stack([-t[:, 1], t[:, 0]])


def thickness_distribution(s, bump_position):
    """Normalised thickness h(s) on [0, 1] with h(bump_position) = 1.

    Piecewise cubic in the manner of the NACA four-digit modified series with
    a sharp leading edge (radius index 0) and a closed trailing edge: the aft
    cubic has zero curvature at the trailing edge, the forward cubic matches
    value, slope and curvature at the crest.
    """
    m = bump_position
    aft = 1.0 - m
    d1 = 1.5 / aft
    d3 = -0.5 / aft**3
    kappa = -3.0 / aft**2
    A = np.array([[m, m * m, m**3], [1.0, 2 * m, 3 * m * m], [0.0, 2.0, 6 * m]])
    a1, a2, a3 = np.linalg.solve(A, [1.0, 0.0, kappa])
    s = np.asarray(s, dtype=np.float64)
    sig = 1.0 - s
    fore = s * (a1 + s * (a2 + s * a3))
    back = sig * (d1 + d3 * sig * sig)
    return np.where(s <= m, fore, back)


def polygon_centroid(points):
    """Area centroid of the polygon closed by joining last to first point."""
    x, y = points[:, 0], points[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-300:
        return points.mean(axis=0), 0.0
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return np.array([cx, cy]), area


def _segments_intersect(points):
    p = points[:-1]
    q = points[1:]
    n = len(p)
    if n < 3:
        return False
    d = q - p
    # all pairs (a, b) with b > a + 1 (adjacent segments share an endpoint)
    ia, ib = np.triu_indices(n, k=2)
    if points.shape[0] > 3 and np.allclose(points[0], points[-1]):
        keep = ~((ia == 0) & (ib == n - 1))
        ia, ib = ia[keep], ib[keep]
    r, s = d[ia], d[ib]
    qp = p[ib] - p[ia]
    denom = r[:, 0] * s[:, 1] - r[:, 1] * s[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]) / denom
        u = (qp[:, 0] * r[:, 1] - qp[:, 1] * r[:, 0]) / denom
    hit = (denom != 0) & (t > 1e-12) & (t < 1 - 1e-12) & (u > 1e-12) & (u < 1 - 1e-12)
    return bool(hit.any())


def generate_profile(params, n_points=129):
    """Bump surface on the lower channel wall, leading edge first.

    The thickness curve spans x in [1, 1 + chord] at zero stagger and is then
    rotated by ``stagger_deg`` (clockwise, nose up) about the area centroid of
    the region between curve and chord line.
    """
    if n_points < 16:
        raise PreconditionError(f"n_points must be >= 16, got {n_points}")
    m = params.bump_position
    n_fore = int(round((n_points - 1) * m))
    n_fore = min(max(n_fore, 1), n_points - 2)
    s = np.concatenate([np.linspace(0.0, m, n_fore + 1), np.linspace(m, 1.0, n_points - n_fore)[1:]])
    h = thickness_distribution(s, m)
    pts = np.column_stack([LEADING_EDGE_X + params.chord * s,
                           params.max_thickness * params.chord * h])
    if params.stagger_deg != 0.0:
        center, _ = polygon_centroid(pts)
        th = -np.deg2rad(params.stagger_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        pts = (pts - center) @ rot.T + center
    if _segments_intersect(np.vstack([pts, pts[:1]])):
        raise SelfIntersectionError(f"profile for {params} intersects itself")
    return SurfacePolyline(pts)


def apply_variation(params, spec):
    """Scale the varied parameter by ``spec.xi``; everything else is copied."""
    name = _FIELD_OF[Parameter(spec.parameter_id)]
    return dataclasses.replace(params, **{name: getattr(params, name) * spec.xi})


def variation_suite(baseline=None, xis=XI_VALUES, section_id="S1"):
    return [VariationSpec(p, xi, section_id) for p in Parameter for xi in xis]


def write_profile_csv(profile, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "nx", "ny", "arc_fraction"])
        for p, n, a in zip(profile.points, profile.normals, profile.arc_fraction):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(n[0])),
                        repr(float(n[1])), repr(float(a))])


def read_profile_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SurfacePolyline(data[:, :2], data[:, 2:4], data[:, 4])
