"""Independent reference implementations used only as test oracles.

The residual here is written cell by cell from the textbook formulas: Roe
dissipation as |A_roe| (U_R - U_L) with |A| assembled from the analytic flux
Jacobian by Sylvester's formula over its three distinct eigenvalues.
"""
import numpy as np


def cons(w, g):
    r, u, v, p = w
    return np.array([r, r * u, r * v, p / (g - 1) + 0.5 * r * (u * u + v * v)])


def flux(w, nx, ny, g):
    r, u, v, p = w
    un = u * nx + v * ny
    H = g / (g - 1) * p / r + 0.5 * (u * u + v * v)
    return np.array([r * un, r * un * u + p * nx, r * un * v + p * ny, r * un * H])


def jacobian(u, v, H, nx, ny, g):
    un = u * nx + v * ny
    phi = 0.5 * (g - 1) * (u * u + v * v)
    return np.array([
        [0.0, nx, ny, 0.0],
        [phi * nx - u * un, un - (g - 2) * u * nx, u * ny - (g - 1) * v * nx, (g - 1) * nx],
        [phi * ny - v * un, v * nx - (g - 1) * u * ny, un - (g - 2) * v * ny, (g - 1) * ny],
        [un * (phi - H), H * nx - (g - 1) * u * un, H * ny - (g - 1) * v * un, g * un],
    ])


def roe(wl, wr, sx, sy, g, delta):
    area = np.hypot(sx, sy)
    nx, ny = sx / area, sy / area
    rl, ul, vl, pl = wl
    rr, ur, vr, pr = wr
    Hl = g / (g - 1) * pl / rl + 0.5 * (ul * ul + vl * vl)
    Hr = g / (g - 1) * pr / rr + 0.5 * (ur * ur + vr * vr)
    a, b = np.sqrt(rl), np.sqrt(rr)
    u = (a * ul + b * ur) / (a + b)
    v = (a * vl + b * vr) / (a + b)
    H = (a * Hl + b * Hr) / (a + b)
    c = np.sqrt((g - 1) * (H - 0.5 * (u * u + v * v)))
    un = u * nx + v * ny
    A = jacobian(u, v, H, nx, ny, g)
    lam = [un - c, un, un + c]
    absA = np.zeros((4, 4))
    for k, lk in enumerate(lam):
        term = np.eye(4) * np.sqrt(lk * lk + (delta * c) ** 2)
        for j, lj in enumerate(lam):
            if j != k:
                term = term @ (A - lj * np.eye(4)) / (lk - lj)
        absA += term
    F = 0.5 * (flux(wl, nx, ny, g) + flux(wr, nx, ny, g)) - 0.5 * absA @ (cons(wr, g) - cons(wl, g))
    return F * area


def van_albada(a, b, eps):
    return (a * (b * b + eps) + b * (a * a + eps)) / (a * a + b * b + 2 * eps)


def _slopes(line, eps, order):
    n = len(line)
    s = np.zeros_like(line)
    if order == 1:
        return s
    for k in range(n):
        if k == 0:
            s[k] = line[1] - line[0]
        elif k == n - 1:
            s[k] = line[-1] - line[-2]
        else:
            s[k] = van_albada(line[k] - line[k - 1], line[k + 1] - line[k], eps)
    return s


def residual(x, y, U, cfg):
    g = cfg.gamma
    ni, nj = U.shape[1], U.shape[2]
    W = np.empty_like(U)
    for i in range(ni):
        for j in range(nj):
            r = U[0, i, j]
            u, v = U[1, i, j] / r, U[2, i, j] / r
            W[:, i, j] = [r, u, v, (g - 1) * (U[3, i, j] - 0.5 * r * (u * u + v * v))]
    R = np.zeros_like(U)
    eps, order, delta = cfg.limiter_eps, cfg.order, cfg.entropy_fix
    cp = g / (g - 1)
    th = np.deg2rad(cfg.inlet_angle_deg)
    # i faces
    for j in range(nj):
        line = W[:, :, j].T
        sl = _slopes(line, eps, order)
        for i in range(ni + 1):
            sx = y[i, j + 1] - y[i, j]
            sy = -(x[i, j + 1] - x[i, j])
            if i == 0:
                p = W[3, 0, j]
                T = cfg.T01 * (p / cfg.P01) ** ((g - 1) / g)
                q = np.sqrt(2 * cp * (cfg.T01 - T))
                F = flux([p / T, q * np.cos(th), q * np.sin(th), p], sx, sy, g)
            elif i == ni:
                r, u, v, _ = W[:, ni - 1, j]
                F = flux([r, u, v, cfg.p_exit], sx, sy, g)
            else:
                wl = line[i - 1] + 0.5 * sl[i - 1]
                wr = line[i] - 0.5 * sl[i]
                F = roe(wl, wr, sx, sy, g, delta)
            if i > 0:
                R[:, i - 1, j] += F
            if i < ni:
                R[:, i, j] -= F
    # j faces
    for i in range(ni):
        line = W[:, i, :].T
        sl = _slopes(line, eps, order)
        for j in range(nj + 1):
            sx = -(y[i + 1, j] - y[i, j])
            sy = x[i + 1, j] - x[i, j]
            if j == 0 or j == nj:
                cell = 0 if j == 0 else nj - 1
                r, u, v, p = W[:, i, cell]
                out = -1.0 if j == 0 else 1.0
                un = out * (u * sx + v * sy) / np.hypot(sx, sy)
                pw = p + r * np.sqrt(g * p / r) * un
                F = np.array([0.0, pw * sx, pw * sy, 0.0])
            else:
                wl = line[j - 1] + 0.5 * sl[j - 1]
                wr = line[j] - 0.5 * sl[j]
                F = roe(wl, wr, sx, sy, g, delta)
            if j > 0:
                R[:, i, j - 1] += F
            if j < nj:
                R[:, i, j] -= F
    return R


def smooth_state(grid, cfg, amp=0.05, seed=0):
    """Smooth random primitive field around the isentropic state at p_exit."""
    r = np.random.default_rng(seed)
    xc = 0.25 * (grid.x[1:, 1:] + grid.x[:-1, 1:] + grid.x[1:, :-1] + grid.x[:-1, :-1])
    yc = 0.25 * (grid.y[1:, 1:] + grid.y[:-1, 1:] + grid.y[1:, :-1] + grid.y[:-1, :-1])
    g = cfg.gamma
    T = cfg.T01 * (cfg.p_exit / cfg.P01) ** ((g - 1) / g)
    q = np.sqrt(2 * g / (g - 1) * (cfg.T01 - T))
    base = [cfg.p_exit / T, q, 0.0, cfg.p_exit]
    W = []
    for k, b in enumerate(base):
        a, kx, ky, ph = r.uniform(-1, 1), r.uniform(0.5, 3), r.uniform(0.5, 3), r.uniform(0, 6)
        scale = 0.2 * q if k == 2 else abs(b)
        W.append(b + amp * scale * a * np.sin(kx * xc + ph) * np.cos(ky * yc))
    return cons(W, g)


def fd_directional(f, U, v, steps=(1e-4, 1e-5, 1e-6, 1e-7, 1e-8)):
    """Central-difference directional derivative at the plateau of a step sweep."""
    est = []
    for h in steps:
        est.append((f(U + h * v) - f(U - h * v)) / (2 * h))
    diffs = [np.abs(est[k + 1] - est[k]).max() for k in range(len(est) - 1)]
    k = int(np.argmin(diffs))
    return est[k + 1]


def fd_dot(f, U, v, w, steps=(8e-6, 4e-6, 2e-6, 1e-6, 5e-7, 2.5e-7, 1.25e-7)):
    """w . (J v) from Richardson-extrapolated central differences, at the plateau of a step sweep."""
    D = {h: float(np.sum((f(U + h * v) - f(U - h * v)) * w)) / (2 * h) for h in steps}
    est = [(4 * D[b] - D[a]) / 3 for a, b in zip(steps, steps[1:])]
    diffs = [abs(est[k + 1] - est[k]) for k in range(len(est) - 1)]
    k = int(np.argmin(diffs))
    return est[k + 1]
