"""STL reading and writing for 2-D profiles stored as unit-depth ribbons.

Binary files follow the usual layout: 80-byte header, little-endian uint32
facet count, then 50 bytes per facet (normal, three vertices as float32,
uint16 attribute).  Vertices are float32 on disk, so a round trip through a
binary file is exact only to about 1e-7 relative.
"""
from __future__ import annotations

import re
import struct

import numpy as np

from .errors import STLFormatError

_FACET = np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
_FLOAT = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def ribbon_triangles(points, depth=1.0):
    """Triangles (m, 3, 3) of the polyline extruded along z from 0 to ``depth``."""
    p = np.asarray(points, dtype=np.float64)
    a0 = np.column_stack([p[:-1], np.zeros(len(p) - 1)])
    b0 = np.column_stack([p[1:], np.zeros(len(p) - 1)])
    a1 = a0 + [0.0, 0.0, depth]
    b1 = b0 + [0.0, 0.0, depth]
    t1 = np.stack([a0, b0, b1], axis=1)
    t2 = np.stack([a0, b1, a1], axis=1)
    return np.stack([t1, t2], axis=1).reshape(-1, 3, 3)


def facet_normals(tri):
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def write_stl(triangles, path, binary=False, name="profile"):
    tri = np.asarray(triangles, dtype=np.float64)
    normals = facet_normals(tri)
    if binary:
        rec = np.zeros(len(tri), dtype=_FACET)
        rec["n"] = normals
        rec["v"] = tri
        with open(path, "wb") as fh:
            fh.write(name.encode("ascii")[:80].ljust(80, b"\0"))
            fh.write(struct.pack("<I", len(tri)))
            fh.write(rec.tobytes())
        return
    with open(path, "w") as fh:
        fh.write(f"solid {name}\n")
        for n, t in zip(normals, tri):
            fh.write(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}\n    outer loop\n")
            for v in t:
                fh.write(f"      vertex {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            fh.write("    endloop\n  endfacet\n")
        fh.write(f"endsolid {name}\n")


def _looks_binary(raw):
    if len(raw) < 84:
        return False
    count = struct.unpack_from("<I", raw, 80)[0]
    return len(raw) == 84 + 50 * count


def read_stl_triangles(path):
    """Triangles (m, 3, 3) from an ASCII or binary STL file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if _looks_binary(raw):
        return _read_binary(raw)
    if raw.lstrip().startswith(b"solid"):
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise STLFormatError("file starts like ASCII STL but contains binary data "
                                 "(mixed format)", exc.start) from None
        return _read_ascii(text)
    return _read_binary(raw)


def _read_binary(raw):
    if len(raw) < 84:
        raise STLFormatError(f"binary STL header truncated ({len(raw)} bytes)", len(raw))
    count = struct.unpack_from("<I", raw, 80)[0]
    avail = (len(raw) - 84) // 50
    if avail < count:
        off = 84 + 50 * avail
        raise STLFormatError(f"binary STL declares {count} facets but data ends at facet "
                             f"{avail + 1}", off)
    rec = np.frombuffer(raw, dtype=_FACET, count=count, offset=84)
    return rec["v"].astype(np.float64)


def _read_ascii(text):
    tris = []
    pos = 0
    facet_re = re.compile(r"\s*facet\s+normal\s+(\S+)\s+(\S+)\s+(\S+)\s+outer\s+loop\s+"
                          + r"".join(rf"vertex\s+({_FLOAT})\s+({_FLOAT})\s+({_FLOAT})\s+" for _ in range(3))
                          + r"endloop\s+endfacet")
    head = re.match(r"\s*solid[^\n]*\n", text)
    if head is None:
        raise STLFormatError("missing 'solid' header", 0)
    pos = head.end()
    end_re = re.compile(r"\s*endsolid\b")
    while True:
        if end_re.match(text, pos):
            break
        m = facet_re.match(text, pos)
        if m is None:
            if pos >= len(text.rstrip()):
                raise STLFormatError("missing 'endsolid'", len(text.encode()))
            off = len(text[:pos].encode()) + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise STLFormatError(f"malformed facet #{len(tris) + 1}", off)
        tris.append([float(v) for v in m.groups()[3:]])
        pos = m.end()
    return np.array(tris, dtype=np.float64).reshape(-1, 3, 3)


def ribbon_polyline(triangles, tol=1e-6):
    """Collapse a z-extruded ribbon to its ordered 2-D polyline (z = min z edge)."""
    tri = np.asarray(triangles, dtype=np.float64)
    if len(tri) == 0:
        raise STLFormatError("no facets", 0)
    z0 = tri[:, :, 2].min()
    on = np.abs(tri[:, :, 2] - z0) <= tol * max(1.0, abs(z0))
    # unique bottom vertices, merged within tolerance
    verts = []
    key = {}

    def vid(p):
        k = tuple(np.round(p / tol).astype(np.int64))
        if k not in key:
            key[k] = len(verts)
            verts.append(p)
        return key[k]

    edges = set()
    for t, m in zip(tri, on):
        ids = [vid(t[a, :2]) for a in range(3) if m[a]]
        if len(ids) == 2 and ids[0] != ids[1]:
            edges.add((min(ids), max(ids)))
    adj = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if not adj:
        raise STLFormatError("ribbon has no bottom edges", 0)
    ends = [v for v, nb in adj.items() if len(nb) == 1]
    # start at the end with the smallest x (leading edge first)
    start = min(ends, key=lambda v: (verts[v][0], verts[v][1])) if ends else min(adj)
    order = [start]
    prev = None
    cur = start
    while True:
        nxt = [v for v in adj[cur] if v != prev]
        if not nxt or (nxt[0] == start):
            break
        prev, cur = cur, nxt[0]
        order.append(cur)
        if len(order) > len(adj):
            raise STLFormatError("ribbon edges do not form a simple chain", 0)
    return np.array([verts[v] for v in order])
