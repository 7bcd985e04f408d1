"""Sparse Jacobians of cell-stencil operators by graph colouring.

A residual whose value in cell (i, j) depends only on cells within a cross
of radius ``r`` can be differentiated with (2r+1)^2 colours per variable:
cells whose indices agree modulo 2r+1 never share a stencil.
"""
from __future__ import annotations

import functools

import numpy as np
import scipy.sparse as sp

from .tape import Tape


def cross_offsets(radius):
    offs = [(0, 0)]
    for d in range(1, radius + 1):
        offs += [(d, 0), (-d, 0), (0, d), (0, -d)]
    return offs


@functools.lru_cache(maxsize=32)
def _pattern(nv, I, J, radius):
    """For each colour and offset: (row cells, column cells) index arrays."""
    p = 2 * radius + 1
    ii, jj = np.meshgrid(np.arange(I), np.arange(J), indexing="ij")
    out = {}
    for ci in range(p):
        for cj in range(p):
            entries = []
            for di, dj in cross_offsets(radius):
                # pairs (row cell, column cell) with column = row + offset in this colour
                ri, rj = ii - di, jj - dj  # row cell for column cell (ii, jj)
                m = ((ii % p) == ci) & ((jj % p) == cj) & (ri >= 0) & (ri < I) & (rj >= 0) & (rj < J)
                col = (ii[m] * J + jj[m])
                row = (ri[m] * J + rj[m])
                entries.append((row, col))
            rows = np.concatenate([e[0] for e in entries])
            cols = np.concatenate([e[1] for e in entries])
            out[(ci, cj)] = (rows, cols)
    return out


def _assemble(blocks, nv, I, J, radius, by_column):
    """blocks[(ci, cj, e)] is a (nv, I, J) response; assemble the (nv*I*J)^2 CSR matrix."""
    N = I * J
    pat = _pattern(nv, I, J, radius)
    R, C, V = [], [], []
    for (ci, cj, e), resp in blocks.items():
        rows, cols = pat[(ci, cj)]
        flat = resp.reshape(nv, N)
        for e2 in range(nv):
            if by_column:
                # perturbing variable e at column cells; response of equation e2 at row cells
                R.append(e2 * N + rows)
                C.append(e * N + cols)
                V.append(flat[e2, rows])
            else:
                # seeding equation e at row cells (here ``cols`` of the pattern);
                # gradient w.r.t. variable e2 at column cells
                R.append(e * N + cols)
                C.append(e2 * N + rows)
                V.append(flat[e2, rows])
    R = np.concatenate(R)
    C = np.concatenate(C)
    V = np.concatenate(V)
    return sp.csr_matrix((V, (R, C)), shape=(nv * N, nv * N))


def fd_jacobian(func, U, radius, rel_step=1e-7, base=None):
    """One-sided finite-difference Jacobian of ``func`` (state -> residual) at ``U``.

    The state is flattened variable-major: index = e * I * J + i * J + j.
    """
    nv, I, J = U.shape
    p = 2 * radius + 1
    R0 = func(U) if base is None else base
    mag = np.abs(U).reshape(nv, -1).max(axis=1)
    scale = np.maximum(mag, 1e-3 * mag.max())
    blocks = {}
    for e in range(nv):
        h = rel_step * scale[e]
        for ci in range(min(p, I)):
            for cj in range(min(p, J)):
                Up = U.copy()
                Up[e, ci::p, cj::p] += h
                blocks[(ci, cj, e)] = (func(Up) - R0) / h
    return _assemble(blocks, nv, I, J, radius, by_column=True)


def ad_jacobian(func, U, radius):
    """Exact Jacobian by one batched reverse sweep over a recorded ``func``."""
    nv, I, J = U.shape
    p = 2 * radius + 1
    tape = Tape()
    Ut = tape.variable(U)
    out = func(Ut)
    tape.register_output(out)
    keys = [(ci, cj, e) for e in range(nv) for ci in range(min(p, I)) for cj in range(min(p, J))]
    seeds = np.zeros((len(keys), nv, I, J))
    for k, (ci, cj, e) in enumerate(keys):
        seeds[k, e, ci::p, cj::p] = 1.0
    grads = tape.gradient([seeds], batched=True)[0]
    # by rows: seeded rows form the colour class; responses sit on column cells,
    # so the pattern is read with rows/cols swapped (the stencil is symmetric)
    blocks = {key: grads[k] for k, key in enumerate(keys)}
    return _assemble(blocks, nv, I, J, radius, by_column=False)
