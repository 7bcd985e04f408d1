"""Steady 2-D Euler solver: cell-centred finite volumes on the channel grid.

Interior faces use Roe's approximate Riemann solver with a smooth entropy
fix (``|lambda| -> sqrt(lambda^2 + (delta c)^2)``) and MUSCL reconstruction
of primitive variables with the van Albada limiter in its differentiable
form.  Inlet and outlet fluxes are the physical fluxes of characteristic
boundary states; walls carry pressure only.

The residual and objective functions are written purely in terms of numpy
operations so the same code runs on plain arrays and on
:class:`~mvadjoint.tape.TracedArray` inputs.

Units are nondimensional with gas constant R = 1.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDenominator, NonPhysicalState, NotConverged, PreconditionError
from .grid import compute_metrics
from .tape import value_of

logger = logging.getLogger(__name__)

JAMESON_RK4 = (0.25, 1.0 / 3.0, 0.5, 1.0)


@dataclass(frozen=True)
class FlowConfig:
    gamma: float = 1.4
    P01: float = 1.0
    T01: float = 1.0
    inlet_angle_deg: float = 0.0
    p_exit: float = 0.70
    scheme: str = "implicit"
    cfl: float = 1.5
    cfl_start: float = 50.0
    cfl_max: float = 1.0e4
    max_iter: int = 20000
    drop_orders: float = 6.0
    order: int = 2
    entropy_fix: float = 0.1
    limiter_eps: float = 1e-8
    rk_alphas: tuple = JAMESON_RK4

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise PreconditionError("gamma must exceed 1")
        if not self.P01 > self.p_exit > 0.0:
            raise PreconditionError("require P01 > p_exit > 0")
        if not self.cfl > 0.0:
            raise PreconditionError("CFL must be positive")
        if self.scheme not in ("implicit", "rk"):
            raise PreconditionError(f"scheme must be 'implicit' or 'rk', got {self.scheme!r}")
        if self.order not in (1, 2):
            raise PreconditionError("order must be 1 or 2")
        object.__setattr__(self, "rk_alphas", tuple(float(a) for a in self.rk_alphas))

    @property
    def cp(self):
        return self.gamma / (self.gamma - 1.0)

    @property
    def H01(self):
        return self.cp * self.T01

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["rk_alphas"] = list(self.rk_alphas)
        return d


# ---------------------------------------------------------------------------
# state conversions

def primitives(U, gamma):
    rho = U[0]
    u = U[1] / rho
    v = U[2] / rho
    p = (gamma - 1.0) * (U[3] - 0.5 * rho * (u * u + v * v))
    return rho, u, v, p


def conservative(rho, u, v, p, gamma):
    return np.stack([rho, rho * u, rho * v, p / (gamma - 1.0) + 0.5 * rho * (u * u + v * v)])


def isentropic_state(config, p):
    """(rho, speed) of flow expanded isentropically from inlet totals to ``p``."""
    g = config.gamma
    T = config.T01 * (p / config.P01) ** ((g - 1.0) / g)
    speed = np.sqrt(np.maximum(2.0 * config.cp * (config.T01 - T), 0.0))
    return p / T, speed


def uniform_state(grid, config, p=None):
    """Uniform flow consistent with the inlet totals at static pressure ``p``."""
    p = config.p_exit if p is None else p
    rho, speed = isentropic_state(config, p)
    th = np.deg2rad(config.inlet_angle_deg)
    shape = (grid.ni - 1, grid.nj - 1)
    return conservative(np.full(shape, rho), np.full(shape, speed * np.cos(th)),
                        np.full(shape, speed * np.sin(th)), np.full(shape, p), config.gamma)


# ---------------------------------------------------------------------------
# residual

def _van_albada(a, b, eps):
    return (a * (b * b + eps) + b * (a * a + eps)) / (a * a + b * b + 2.0 * eps)


def reconstruction_increments(W, axis, eps, order):
    """MUSCL increments (left state minus lower cell, upper cell minus right state).

    ``W`` is the stacked primitive array (4, I, J); the increments live on
    interior faces along ``axis`` (1 -> i, 2 -> j).
    """
    if order == 1:
        return 0.0, 0.0
    if axis == 1:
        d = W[:, 1:] - W[:, :-1]
        mid = _van_albada(d[:, :-1], d[:, 1:], eps)
        slope = np.concatenate([d[:, :1], mid, d[:, -1:]], axis=1)
        return 0.5 * slope[:, :-1], 0.5 * slope[:, 1:]
    d = W[:, :, 1:] - W[:, :, :-1]
    mid = _van_albada(d[:, :, :-1], d[:, :, 1:], eps)
    slope = np.concatenate([d[:, :, :1], mid, d[:, :, -1:]], axis=2)
    return 0.5 * slope[:, :, :-1], 0.5 * slope[:, :, 1:]


def physical_flux(rho, u, v, p, sx, sy, gamma):
    un = u * sx + v * sy
    mass = rho * un
    H = gamma / (gamma - 1.0) * p / rho + 0.5 * (u * u + v * v)
    return np.stack([mass, mass * u + p * sx, mass * v + p * sy, mass * H])


def roe_averages(WL, WR, nx, ny, gamma, delta):
    """Roe-averaged state and smoothed wave speeds at faces."""
    rL, uL, vL, pL = WL[0], WL[1], WL[2], WL[3]
    rR, uR, vR, pR = WR[0], WR[1], WR[2], WR[3]
    gm1 = gamma - 1.0
    HL = gamma / gm1 * pL / rL + 0.5 * (uL * uL + vL * vL)
    HR = gamma / gm1 * pR / rR + 0.5 * (uR * uR + vR * vR)
    sL = np.sqrt(rL)
    sR = np.sqrt(rR)
    w = 1.0 / (sL + sR)
    ub = (sL * uL + sR * uR) * w
    vb = (sL * vL + sR * vR) * w
    Hb = (sL * HL + sR * HR) * w
    rb = sL * sR
    q2 = ub * ub + vb * vb
    c2 = gm1 * (Hb - 0.5 * q2)
    c = np.sqrt(c2)
    unb = ub * nx + vb * ny
    d2 = (delta * c) * (delta * c)
    l1 = np.sqrt((unb - c) * (unb - c) + d2)
    l2 = np.sqrt(unb * unb + d2)
    l3 = np.sqrt((unb + c) * (unb + c) + d2)
    return {"ub": ub, "vb": vb, "Hb": Hb, "rb": rb, "c": c, "c2": c2, "q2": q2, "unb": unb,
            "l1": l1, "l2": l2, "l3": l3}


def roe_flux(WL, WR, sx, sy, gamma, delta=0.1, frozen=None):
    """Roe flux through faces with (unnormalised) normal ``(sx, sy)``.

    ``WL``/``WR`` are stacked primitive states (4, ...).  ``frozen`` replaces
    the Roe-averaged state and wave speeds by constants, which leaves the
    dissipation linear in the primitive jumps.
    """
    rL, uL, vL, pL = WL[0], WL[1], WL[2], WL[3]
    rR, uR, vR, pR = WR[0], WR[1], WR[2], WR[3]
    area = np.sqrt(sx * sx + sy * sy)
    nx = sx / area
    ny = sy / area
    gm1 = gamma - 1.0
    HL = gamma / gm1 * pL / rL + 0.5 * (uL * uL + vL * vL)
    HR = gamma / gm1 * pR / rR + 0.5 * (uR * uR + vR * vR)
    unL = uL * nx + vL * ny
    unR = uR * nx + vR * ny
    mL = rL * unL
    mR = rR * unR
    a = frozen if frozen is not None else roe_averages(WL, WR, nx, ny, gamma, delta)
    ub, vb, Hb, rb, c, c2 = a["ub"], a["vb"], a["Hb"], a["rb"], a["c"], a["c2"]
    unb = a["unb"]
    dr = rR - rL
    dp = pR - pL
    dun = unR - unL
    a1 = a["l1"] * (dp - rb * c * dun) / (2.0 * c2)
    a3 = a["l3"] * (dp + rb * c * dun) / (2.0 * c2)
    a2 = a["l2"] * (dr - dp / c2)
    dut = (uR - uL) - dun * nx
    dvt = (vR - vL) - dun * ny
    a4 = a["l2"] * rb
    D0 = a1 + a2 + a3
    D1 = a1 * (ub - c * nx) + a2 * ub + a3 * (ub + c * nx) + a4 * dut
    D2 = a1 * (vb - c * ny) + a2 * vb + a3 * (vb + c * ny) + a4 * dvt
    D3 = (a1 * (Hb - unb * c) + a2 * (0.5 * a["q2"]) + a3 * (Hb + unb * c)
          + a4 * (ub * dut + vb * dvt))
    F0 = 0.5 * (mL + mR) - 0.5 * D0
    F1 = 0.5 * (mL * uL + mR * uR + (pL + pR) * nx) - 0.5 * D1
    F2 = 0.5 * (mL * vL + mR * vR + (pL + pR) * ny) - 0.5 * D2
    F3 = 0.5 * (mL * HL + mR * HR) - 0.5 * D3
    return np.stack([F0 * area, F1 * area, F2 * area, F3 * area])


def inlet_state(rho0, u0, v0, p0, config):
    """Subsonic inflow: totals and flow angle imposed, static pressure extrapolated."""
    rho, speed = isentropic_state(config, p0)
    th = np.deg2rad(config.inlet_angle_deg)
    return rho, speed * np.cos(th), speed * np.sin(th), p0


def outlet_state(rho0, u0, v0, p0, config):
    """Subsonic outflow: static pressure imposed, the rest extrapolated."""
    return rho0, u0, v0, p0 * 0.0 + config.p_exit


def boundary_states(U, config):
    """(inlet, outlet) boundary primitive states, one entry per boundary face."""
    rho, u, v, p = primitives(U, config.gamma)
    w_in = inlet_state(rho[0], u[0], v[0], p[0], config)
    w_out = outlet_state(rho[-1], u[-1], v[-1], p[-1], config)
    return w_in, w_out


def _face_geometry(x, y):
    dxi = x[:, 1:] - x[:, :-1]
    dyi = y[:, 1:] - y[:, :-1]
    dxj = x[1:, :] - x[:-1, :]
    dyj = y[1:, :] - y[:-1, :]
    return dyi, -dxi, -dyj, dxj


def freeze_coefficients(x, y, U, config):
    """Reconstruction increments and Roe averages at ``U``, for frozen linearisation."""
    g = config.gamma
    six, siy, sjx, sjy = _face_geometry(x, y)
    W = np.stack(primitives(U, g))
    out = {}
    for axis, sx, sy in ((1, six[1:-1], siy[1:-1]), (2, sjx[:, 1:-1], sjy[:, 1:-1])):
        incL, incR = reconstruction_increments(W, axis, config.limiter_eps, config.order)
        lo, hi = (W[:, :-1], W[:, 1:]) if axis == 1 else (W[:, :, :-1], W[:, :, 1:])
        area = np.sqrt(sx * sx + sy * sy)
        avg = roe_averages(lo + incL, hi - incR, sx / area, sy / area, g, config.entropy_fix)
        out[axis] = {"incL": incL, "incR": incR, "avg": avg}
    return out


def residual(x, y, U, config, frozen=None):
    """Net flux out of every cell, shape (4, ni-1, nj-1).

    With ``frozen`` (from :func:`freeze_coefficients`) the MUSCL increments
    and the Roe dissipation coefficients are held at their frozen values.
    """
    g = config.gamma
    six, siy, sjx, sjy = _face_geometry(x, y)
    rho, u, v, p = primitives(U, g)
    bad = ~((value_of(rho) > 0.0) & (value_of(p) > 0.0))
    if bad.any():
        raise NonPhysicalState(np.argwhere(bad)[0])
    W = np.stack([rho, u, v, p])

    def faces(axis):
        if frozen is None:
            incL, incR = reconstruction_increments(W, axis, config.limiter_eps, config.order)
            avg = None
        else:
            incL, incR, avg = frozen[axis]["incL"], frozen[axis]["incR"], frozen[axis]["avg"]
        lo, hi = (W[:, :-1], W[:, 1:]) if axis == 1 else (W[:, :, :-1], W[:, :, 1:])
        return lo + incL, hi - incR, avg

    WL, WR, avg = faces(1)
    Fi_int = roe_flux(WL, WR, six[1:-1], siy[1:-1], g, config.entropy_fix, avg)
    w_in, w_out = boundary_states(U, config)
    F_in = physical_flux(*w_in, six[0], siy[0], g)
    F_out = physical_flux(*w_out, six[-1], siy[-1], g)
    Fi = np.concatenate([F_in[:, None], Fi_int, F_out[:, None]], axis=1)

    WL, WR, avg = faces(2)
    Fj_int = roe_flux(WL, WR, sjx[:, 1:-1], sjy[:, 1:-1], g, config.entropy_fix, avg)
    F_lo = _wall_flux(rho[:, 0], u[:, 0], v[:, 0], p[:, 0], sjx[:, 0], sjy[:, 0], g, -1.0)
    F_hi = _wall_flux(rho[:, -1], u[:, -1], v[:, -1], p[:, -1], sjx[:, -1], sjy[:, -1], g, 1.0)
    Fj = np.concatenate([F_lo[:, :, None], Fj_int, F_hi[:, :, None]], axis=2)

    return (Fi[:, 1:] - Fi[:, :-1]) + (Fj[:, :, 1:] - Fj[:, :, :-1])


def _wall_flux(rho, u, v, p, sx, sy, gamma, outward):
    # acoustic (linearised Riemann) wall pressure; outward is +-1 along (sx, sy)
    area = np.sqrt(sx * sx + sy * sy)
    un = outward * (u * sx + v * sy) / area
    c = np.sqrt(gamma * p / rho)
    pw = p + rho * c * un
    zero = 0.0 * pw
    return np.stack([zero, pw * sx, pw * sy, zero])


# ---------------------------------------------------------------------------
# objectives and station averages

def _station(U, x, y, config, station):
    g = config.gamma
    w_in, w_out = boundary_states(U, config)
    if station == "inlet":
        w = w_in
        sx = y[0, 1:] - y[0, :-1]
        sy = -(x[0, 1:] - x[0, :-1])
    elif station == "outlet":
        w = w_out
        sx = y[-1, 1:] - y[-1, :-1]
        sy = -(x[-1, 1:] - x[-1, :-1])
    else:
        raise PreconditionError(f"unknown station {station!r}")
    rho, u, v, p = w
    mdot = rho * (u * sx + v * sy)
    T = p / rho
    T0 = T + 0.5 * (u * u + v * v) / config.cp
    P0 = p * (T0 / T) ** (g / (g - 1.0))
    H0 = config.cp * T0
    area = np.sqrt(sx * sx + sy * sy)
    return mdot, P0, H0, p, area


def mass_flow(U, x, y, config, station="outlet"):
    mdot = _station(U, x, y, config, station)[0]
    return np.sum(mdot)


def pressure_loss(U, x, y, config):
    """Y = (P01 - P02) / (P02 - p02); works on traced arrays."""
    mdot, P0, _, p, area = _station(U, x, y, config, "outlet")
    m = np.sum(mdot)
    P02 = np.sum(mdot * P0) / m
    p02 = np.sum(p * area) / np.sum(area)
    mi, P0i, _, _, _ = _station(U, x, y, config, "inlet")
    P01 = np.sum(mi * P0i) / np.sum(mi)
    return (P01 - P02) / (P02 - p02)


OBJECTIVES = {
    "MassFlow": mass_flow,
    "PressureLossY": pressure_loss,
}


def evaluate_objective(name, U, x, y, config):
    try:
        fn = OBJECTIVES[name]
    except KeyError:
        raise PreconditionError(f"unknown objective {name!r}; choose from {sorted(OBJECTIVES)}") from None
    return fn(U, x, y, config)


def station_averages(U, grid, config):
    out = {}
    for st, tag in (("inlet", "1"), ("outlet", "2")):
        mdot, P0, H0, p, area = _station(U, grid.x, grid.y, config, st)
        m = mdot.sum()
        out[f"mdot_{st}"] = float(m)
        out[f"P0{tag}"] = float((mdot * P0).sum() / m)
        out[f"H0{tag}"] = float((mdot * H0).sum() / m)
        out[f"p0{tag}"] = float((p * area).sum() / area.sum())
    g = config.gamma
    # isentropic outlet total enthalpy at the actual outlet total pressure
    out["H02is"] = float(config.H01 * (out["P02"] / out["P01"]) ** ((g - 1.0) / g))
    return out


def objective_mass_flow(solution, station="outlet"):
    return float(mass_flow(solution.state, solution.grid.x, solution.grid.y, solution.config, station))


def objective_pressure_loss(solution):
    s = solution.station_averages
    P01, P02, p02 = s["P01"], s["P02"], s["p02"]
    return pressure_loss_coefficient(P01, P02, p02)


def pressure_loss_coefficient(P01, P02, p02):
    den = P02 - p02
    if not den > 0.0:
        raise DegenerateDenominator(f"P02 - p02 = {den:.3e} <= 0 (stagnant outlet)")
    return (P01 - P02) / den


def isentropic_efficiency(H01, H02, H02is):
    den = H02is - H01
    if den == 0.0:
        raise DegenerateDenominator("H02,is equals H01")
    return (H02 - H01) / den


# ---------------------------------------------------------------------------
# time marching

def local_timestep(U, metrics, config):
    """dt / V per cell for the given CFL."""
    rho, u, v, p = primitives(U, config.gamma)
    c = np.sqrt(config.gamma * p / rho)
    si = 0.5 * (metrics.si[:, 1:, :] + metrics.si[:, :-1, :])
    sj = 0.5 * (metrics.sj[:, :, 1:] + metrics.sj[:, :, :-1])
    li = np.abs(u * si[0] + v * si[1]) + c * np.hypot(si[0], si[1])
    lj = np.abs(u * sj[0] + v * sj[1]) + c * np.hypot(sj[0], sj[1])
    return config.cfl / (li + lj)


def l1_norm(R):
    return float(np.abs(R[0]).mean())


def check_physical(U, gamma):
    rho, u, v, p = primitives(U, gamma)
    bad = ~((rho > 0.0) & (p > 0.0))
    if bad.any():
        raise NonPhysicalState(np.argwhere(bad)[0])


@dataclass(eq=False)
class FlowSolution:
    grid: object
    config: FlowConfig
    state: np.ndarray
    residual_history: np.ndarray
    converged: bool
    iterations_used: int
    station_averages: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def mass_flow(self):
        return self.station_averages["mdot_outlet"]

    @property
    def pressure_loss(self):
        return objective_pressure_loss(self)

    def objective(self, name):
        if name == "MassFlow":
            return self.mass_flow
        if name == "PressureLossY":
            return self.pressure_loss
        raise PreconditionError(f"unknown objective {name!r}")

    def mach(self):
        rho, u, v, p = primitives(self.state, self.config.gamma)
        return np.hypot(u, v) / np.sqrt(self.config.gamma * p / rho)

    def save(self, path, mesh_hash=None):
        """Binary state dump (.npz) keyed to the mesh hash."""
        np.savez(path, state=self.state, residual_history=self.residual_history,
                 converged=self.converged, iterations_used=self.iterations_used,
                 mesh_hash=mesh_hash or grid_hash(self.grid),
                 config=json.dumps(self.config.to_dict()))

    def write_history_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,l1_residual\n")
            for k, r in enumerate(self.residual_history):
                fh.write(f"{k},{r:.17g}\n")

    def write_station_json(self, path):
        Path(path).write_text(json.dumps(self.station_averages, indent=2))


def grid_hash(grid):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(grid.x).tobytes())
    h.update(np.ascontiguousarray(grid.y).tobytes())
    return h.hexdigest()[:16]


def load_state(path, grid=None):
    data = np.load(path)
    if grid is not None and str(data["mesh_hash"]) != grid_hash(grid):
        raise PreconditionError(f"{path}: state belongs to a different mesh")
    return data["state"]


def rk_step(U, x, y, metrics, config, dtv=None):
    """One multi-stage pseudo-time step; returns (new state, residual at U)."""
    if dtv is None:
        dtv = local_timestep(U, metrics, config)
    R0 = residual(x, y, U, config)
    Uk = U
    for k, a in enumerate(config.rk_alphas):
        R = R0 if k == 0 else residual(x, y, Uk, config)
        Uk = U - (a * dtv) * R
    return Uk, R0


def implicit_operator(U, x, y, metrics, config, cfl):
    """Pseudo-time operator diag(V/dt) + dR1/dU with the first-order Jacobian.

    Returned as a sparse LU factorisation; the state ordering is the
    variable-major flattening used by :mod:`mvadjoint.sparsity`.
    """
    from scipy.sparse import diags
    from scipy.sparse.linalg import splu

    from .sparsity import fd_jacobian

    first = config.replace(order=1)
    A1 = fd_jacobian(lambda V: residual(x, y, V, first), U, radius=1)
    inv_dtv = 1.0 / local_timestep(U, metrics, config.replace(cfl=cfl))
    M = A1 + diags(np.tile(inv_dtv.ravel(), U.shape[0]))
    return splu(M.tocsc(), permc_spec="COLAMD")


def _physical(U, gamma):
    rho, u, v, p = primitives(U, gamma)
    return bool(np.all(rho > 0.0) and np.all(p > 0.0) and np.all(np.isfinite(U)))


def solve_primal(grid, config, initial=None, reference_residual=None, raise_on_fail=False,
                 callback=None, cfl_start=None):
    """March to steady state in pseudo-time with local time stepping.

    ``scheme="implicit"`` (default) takes backward-Euler steps preconditioned
    by the first-order Jacobian, with the CFL number growing as the residual
    falls; ``scheme="rk"`` is explicit multi-stage marching.

    Convergence means the L1 density residual has dropped ``drop_orders``
    below ``reference_residual`` (default: the residual of the first
    iteration).  A non-converged run returns the partial solution with
    ``converged=False`` unless ``raise_on_fail`` is set, in which case
    :class:`NotConverged` carries it.
    """
    t0 = time.perf_counter()
    metrics = compute_metrics(grid)
    U = uniform_state(grid, config) if initial is None else np.array(initial, dtype=np.float64)
    if U.shape != (4, grid.ni - 1, grid.nj - 1):
        raise PreconditionError(f"initial state has shape {U.shape}, expected {(4, grid.ni - 1, grid.nj - 1)}")
    check_physical(U, config.gamma)
    x, y = grid.x, grid.y
    hist = []
    converged = False
    R = residual(x, y, U, config)
    r = l1_norm(R)
    ref = reference_residual if reference_residual is not None else r
    target = ref * 10.0 ** (-config.drop_orders)
    # a state already at round-off level counts as converged
    floor = 1e-14 * float(np.abs(U[3]).mean())
    cfl = config.cfl_start if cfl_start is None else cfl_start
    lu = None
    age = 0
    it = 0
    while True:
        if not np.isfinite(r):
            raise NonPhysicalState(message=f"residual became non-finite at iteration {it}")
        hist.append(r)
        if r <= max(target, floor):
            converged = True
            break
        if it >= config.max_iter:
            break
        it += 1
        if config.scheme == "rk":
            U, _ = rk_step(U, x, y, metrics, config)
            if it % 50 == 0:
                check_physical(U, config.gamma)
            R = residual(x, y, U, config)
            r = l1_norm(R)
        else:
            if lu is None or cfl < config.cfl_max:
                lu = implicit_operator(U, x, y, metrics, config, cfl)
                age = 0
            age += 1
            dU = lu.solve(-R.ravel()).reshape(U.shape)
            step = 1.0
            while not _physical(U + step * dU, config.gamma) and step > 1e-3:
                step *= 0.5
            U_try = U + step * dU
            r_try = np.inf
            if _physical(U_try, config.gamma):
                with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                    R_try = residual(x, y, U_try, config)
                r_try = l1_norm(R_try)
            if step < 1e-3 or not np.isfinite(r_try) or r_try > 100.0 * r:
                # reject: retreat in CFL and retry from the same state
                if cfl <= 1.0:
                    raise NonPhysicalState(message=f"implicit update rejected at CFL 1, iteration {it}")
                cfl = max(1.0, 0.1 * cfl)
                lu = None
                continue
            if step < 1.0:
                cfl = max(1.0, 0.5 * cfl)
                lu = None
            elif r_try > 2.0 * r:
                cfl = max(1.0, 0.5 * cfl)
                lu = None
            elif cfl < config.cfl_max:
                cfl = min(config.cfl_max, 2.0 * cfl)
            if cfl >= config.cfl_max and age >= 5 and r_try > 0.85**5 * hist[-5]:
                # slow contraction with a stale factorisation: refresh it
                lu = None
            U, R, r = U_try, R_try, r_try
        if callback is not None:
            callback(it, r)
    sol = FlowSolution(grid, config, U, np.array(hist), converged, it,
                       station_averages(U, grid, config), time.perf_counter() - t0)
    logger.info("primal: %d iterations, drop %.2f orders, converged=%s",
                it, np.log10(hist[0] / hist[-1]) if hist[-1] > 0 else np.inf, converged)
    if not converged and raise_on_fail:
        raise NotConverged(f"primal did not reach {config.drop_orders} orders in {config.max_iter} "
                           f"iterations", sol)
    return sol
