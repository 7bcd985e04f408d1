"""Structured channel grid, finite-volume metrics and Plot3D-style mesh I/O.

Node arrays are indexed ``[i, j]`` with ``i`` running from inlet to outlet
and ``j`` from the lower wall (which carries the bump) to the upper wall.
Cell ``(i, j)`` is bounded by nodes ``i..i+1`` and ``j..j+1``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import MeshFormatError, NegativeVolume, PreconditionError
from .geometry import CHANNEL_HEIGHT, CHANNEL_LENGTH

BOUNDARY_TAGS = {
    "inlet": "i=0",
    "outlet": "i=ni-1",
    "lower_wall": "j=0",
    "upper_wall": "j=nj-1",
}


@dataclass(frozen=True, eq=False)
class StructuredGrid:
    x: np.ndarray
    y: np.ndarray
    surface_range: tuple = (0, 0)  # first and last i of bump nodes on j=0, inclusive

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 2:
            raise PreconditionError("x and y must be 2-D arrays of equal shape")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "surface_range", (int(self.surface_range[0]), int(self.surface_range[1])))

    @property
    def ni(self):
        return self.x.shape[0]

    @property
    def nj(self):
        return self.x.shape[1]

    @property
    def shape(self):
        return self.x.shape

    @property
    def n_cells(self):
        return (self.ni - 1) * (self.nj - 1)

    @property
    def coords(self):
        return np.stack([self.x, self.y], axis=-1)

    @property
    def surface_indices(self):
        i0, i1 = self.surface_range
        return np.arange(i0, i1 + 1)

    @property
    def surface_points(self):
        idx = self.surface_indices
        return np.column_stack([self.x[idx, 0], self.y[idx, 0]])

    def with_coords(self, x, y):
        return StructuredGrid(x, y, self.surface_range)

    def tags(self):
        return {"ni": self.ni, "nj": self.nj, "surface_index_range": list(self.surface_range),
                "boundaries": BOUNDARY_TAGS}


@dataclass(frozen=True, eq=False)
class CellMetrics:
    """Face normals scaled by face length, and cell areas.

    ``si[:, i, j]`` is the normal of the face between cells ``(i-1, j)`` and
    ``(i, j)``, pointing towards increasing ``i``; ``sj`` likewise in ``j``.
    """

    si: np.ndarray  # (2, ni, nj-1)
    sj: np.ndarray  # (2, ni-1, nj)
    volume: np.ndarray  # (ni-1, nj-1)

    def face_cells_i(self):
        """(left, right) flat cell indices per i-face; -1 marks a boundary."""
        nci, ncj = self.volume.shape
        cell = np.arange(nci * ncj).reshape(nci, ncj)
        pad = np.full((1, ncj), -1)
        return np.concatenate([pad, cell]), np.concatenate([cell, pad])

    def face_cells_j(self):
        nci, ncj = self.volume.shape
        cell = np.arange(nci * ncj).reshape(nci, ncj)
        pad = np.full((nci, 1), -1)
        return np.concatenate([pad, cell], axis=1), np.concatenate([cell, pad], axis=1)

    def closure(self):
        """Sum of outward face normals per cell; zero for closed cells."""
        return (self.si[:, 1:, :] - self.si[:, :-1, :]) + (self.sj[:, :, 1:] - self.sj[:, :, :-1])


def face_normals(x, y):
    """Face normal vectors; works on numpy or traced arrays."""
    dxi = x[:, 1:] - x[:, :-1]
    dyi = y[:, 1:] - y[:, :-1]
    dxj = x[1:, :] - x[:-1, :]
    dyj = y[1:, :] - y[:-1, :]
    return (dyi, -dxi), (-dyj, dxj)


def cell_areas(x, y):
    d1x = x[1:, 1:] - x[:-1, :-1]
    d1y = y[1:, 1:] - y[:-1, :-1]
    d2x = x[:-1, 1:] - x[1:, :-1]
    d2y = y[:-1, 1:] - y[1:, :-1]
    return 0.5 * (d1x * d2y - d1y * d2x)


def check_volumes(volume):
    bad = np.argwhere(~(volume > 0.0))
    if len(bad):
        i, j = bad[0]
        raise NegativeVolume((i, j), float(volume[i, j]))


def compute_metrics(grid):
    (six, siy), (sjx, sjy) = face_normals(grid.x, grid.y)
    vol = cell_areas(grid.x, grid.y)
    check_volumes(vol)
    return CellMetrics(np.stack([six, siy]), np.stack([sjx, sjy]), vol)


def boundary_polygon(grid):
    """Domain boundary nodes, counter-clockwise."""
    lower = grid.coords[:, 0]
    right = grid.coords[-1, 1:]
    upper = grid.coords[-2::-1, -1]
    left = grid.coords[0, -2:0:-1]
    return np.concatenate([lower, right, upper, left])


def shoelace_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _stretched(a, b, n, h_end, at_end=True):
    """n+1 points from a to b with geometric spacing ending (or starting) at h_end."""
    L = b - a
    if n == 1:
        return np.array([a, b])

    def total(r):
        if abs(r - 1.0) < 1e-12:
            return h_end * n - L
        return h_end * (r**n - 1.0) / (r - 1.0) - L

    if abs(total(1.0)) < 1e-14 * max(abs(L), 1.0):
        r = 1.0
    else:
        r = brentq(total, 1e-3, 1e3, xtol=1e-15, rtol=1e-15, maxiter=500)
    h = h_end * r ** np.arange(n)
    h *= L / h.sum()
    if at_end:
        h = h[::-1]
    return a + np.concatenate([[0.0], np.cumsum(h)])


def generate_grid(profile, ni=121, nj=41, smoothing_passes=0, cluster=True):
    """Algebraic channel grid whose j=0 line passes through ``profile``.

    Wall nodes upstream and downstream of the bump are stretched
    geometrically so their spacing matches the bump spacing at the junction
    (``cluster=False`` spaces them uniformly).  The interior is the linear
    transfinite interpolation between lower and upper walls, optionally
    followed by Laplacian smoothing passes on interior nodes.
    """
    if ni < 33 or nj < 17:
        raise PreconditionError(f"grid too small: ni={ni} (>= 33), nj={nj} (>= 17) required")
    ns = profile.n_points
    n_free = ni - ns
    if n_free < 4:
        raise PreconditionError(f"ni={ni} leaves too few wall nodes around a {ns}-node profile")
    n_up = n_free // 2
    n_dn = n_free - n_up
    pts = profile.points
    le, te = pts[0], pts[-1]
    h_le = np.hypot(*(pts[1] - pts[0]))
    h_te = np.hypot(*(pts[-1] - pts[-2]))
    if cluster:
        xu = _stretched(0.0, le[0], n_up, h_le, at_end=True)
        xd = _stretched(te[0], CHANNEL_LENGTH * _chord_scale(profile), n_dn, h_te, at_end=False)
    else:
        xu = np.linspace(0.0, le[0], n_up + 1)
        xd = np.linspace(te[0], CHANNEL_LENGTH * _chord_scale(profile), n_dn + 1)
    yu = le[1] * xu / le[0]
    x_end = xd[-1]
    yd = te[1] * (x_end - xd) / (x_end - te[0])
    xb = np.concatenate([xu[:-1], pts[:, 0], xd[1:]])
    yb = np.concatenate([yu[:-1], pts[:, 1], yd[1:]])
    height = CHANNEL_HEIGHT * _chord_scale(profile)
    eta = np.linspace(0.0, 1.0, nj)
    x = xb[:, None] + 0.0 * eta[None, :]
    y = yb[:, None] + (height - yb)[:, None] * eta[None, :]
    grid = StructuredGrid(x, y, (n_up, n_up + ns - 1))
    if smoothing_passes:
        grid = laplace_smooth(grid, smoothing_passes)
    check_volumes(cell_areas(grid.x, grid.y))
    return grid


def channel_grid(ni, nj, bump_height=0.05, length=CHANNEL_LENGTH, height=CHANNEL_HEIGHT):
    """Small uniform channel with a sine-squared bump on the middle third (tests, quick checks)."""
    if ni < 4 or nj < 3:
        raise PreconditionError(f"channel grid needs ni >= 4 and nj >= 3, got {ni} x {nj}")
    xb = np.linspace(0.0, length, ni)
    s = (xb - length / 3.0) / (length / 3.0)
    on = (s >= 0.0) & (s <= 1.0)
    yb = np.where(on, bump_height * np.sin(np.pi * np.clip(s, 0.0, 1.0)) ** 2, 0.0)
    eta = np.linspace(0.0, 1.0, nj)
    x = xb[:, None] + 0.0 * eta[None, :]
    y = yb[:, None] + (height - yb)[:, None] * eta[None, :]
    idx = np.flatnonzero(on)
    if len(idx) < 2:
        idx = np.array([1, ni - 2])
    grid = StructuredGrid(x, y, (int(idx[0]), int(idx[-1])))
    check_volumes(cell_areas(grid.x, grid.y))
    return grid


def _chord_scale(profile):
    # chord length recovered from the unrotated span; walls scale with it
    return float(np.hypot(*(profile.points[-1] - profile.points[0])))


def laplace_smooth(grid, passes, omega=0.5):
    x, y = grid.x.copy(), grid.y.copy()
    for _ in range(passes):
        for a in (x, y):
            avg = 0.25 * (a[2:, 1:-1] + a[:-2, 1:-1] + a[1:-1, 2:] + a[1:-1, :-2])
            a[1:-1, 1:-1] += omega * (avg - a[1:-1, 1:-1])
    return grid.with_coords(x, y)


# ---------------------------------------------------------------------------
# mesh files

def write_mesh(grid, path, binary=False):
    """Single-block 2-D Plot3D file plus a ``.tags.json`` sidecar.

    Text files hold the header ``ni nj`` then the x block and the y block,
    i varying fastest, one value per line at 17 significant digits.  Binary
    files hold two little-endian int32 then float64 blocks in the same order.
    """
    path = Path(path)
    if binary:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<ii", grid.ni, grid.nj))
            fh.write(grid.x.T.astype("<f8").tobytes())
            fh.write(grid.y.T.astype("<f8").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(f"{grid.ni} {grid.nj}\n")
            for block in (grid.x, grid.y):
                fh.write("\n".join(f"{v:.17g}" for v in block.T.ravel()))
                fh.write("\n")
    tags_path(path).write_text(json.dumps(grid.tags(), indent=2))
    return path


def tags_path(path):
    path = Path(path)
    return path.with_name(path.name + ".tags.json") if not path.name.endswith(".p2d") \
        else path.with_suffix(".tags.json")


def read_mesh(path):
    path = Path(path)
    raw = path.read_bytes()
    if b"\x00" in raw[:8]:
        x, y = _read_binary(raw, path)
    else:
        x, y = _read_text(raw.decode("ascii", errors="replace"), path)
    tp = tags_path(path)
    rng = (0, 0)
    if tp.exists():
        tags = json.loads(tp.read_text())
        if (tags.get("ni"), tags.get("nj")) != x.shape:
            raise MeshFormatError(f"{tp}: tags describe {tags.get('ni')}x{tags.get('nj')}, "
                                  f"mesh is {x.shape[0]}x{x.shape[1]}")
        rng = tuple(tags["surface_index_range"])
    return StructuredGrid(x, y, rng)


def _read_binary(raw, path):
    if len(raw) < 8:
        raise MeshFormatError(f"{path}: header truncated at byte offset {len(raw)}")
    ni, nj = struct.unpack_from("<ii", raw, 0)
    expected = 2 * ni * nj
    found = (len(raw) - 8) // 8
    if found != expected:
        raise MeshFormatError(f"{path}: expected {expected} node values ({ni}x{nj} nodes), "
                              f"found {found} at byte offset {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=8)
    x = data[: ni * nj].reshape(nj, ni).T.copy()
    y = data[ni * nj:].reshape(nj, ni).T.copy()
    return x, y


def _read_text(text, path):
    lines = text.splitlines()
    if not lines:
        raise MeshFormatError(f"{path}: empty file")
    head = lines[0].split()
    try:
        ni, nj = int(head[0]), int(head[1])
    except (IndexError, ValueError):
        raise MeshFormatError(f"{path}:1: expected header 'ni nj', found {lines[0]!r}") from None
    vals = []
    for lineno, line in enumerate(lines[1:], start=2):
        for tok in line.split():
            try:
                vals.append(float(tok))
            except ValueError:
                raise MeshFormatError(f"{path}:{lineno}: cannot parse {tok!r} as a number") from None
    expected = 2 * ni * nj
    if len(vals) != expected:
        raise MeshFormatError(f"{path}: expected {expected} node values ({ni}x{nj} nodes per block), "
                              f"found {len(vals)} (through line {len(lines)})")
    data = np.array(vals)
    return data[: ni * nj].reshape(nj, ni).T.copy(), data[ni * nj:].reshape(nj, ni).T.copy()
