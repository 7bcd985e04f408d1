"""Validation campaigns: baseline primal and adjoints, then per-sample prediction
versus nonlinear re-solve, persisted under ``runs/<id>/``."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .. import adjoint as adj
from ..errors import NegativeVolume, NonPhysicalState, NotConverged
from ..euler import solve_primal
from ..geometry import VariationSpec, apply_variation, generate_profile
from ..grid import generate_grid, write_mesh
from ..morph import DeformationField, MorphOperator, clamp, morph_mesh
from ..mva import PerturbationModel, scan_deformation, synthesize_scan
from .config import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


@dataclass(eq=False)
class Baseline:
    params: object
    grid: object
    solution: object
    operator: MorphOperator
    adjoints: dict = field(default_factory=dict)   # (objective, variant) -> AdjointSolution
    fields: dict = field(default_factory=dict)     # -> SensitivityField
    maps: dict = field(default_factory=dict)       # -> SurfaceSensitivity
    timings: dict = field(default_factory=dict)

    def objective(self, name):
        return self.solution.objective(name)


@dataclass(eq=False)
class Sample:
    sample_id: str
    deformation: DeformationField = None  # surface displacement (morph route)
    grid: object = None                   # regenerated mesh (parametric route)
    measure_time: float = 0.0


def build_grid(cfg, params=None):
    g = cfg["grid"]
    params = cfg.blade_params() if params is None else params
    return generate_grid(generate_profile(params, g["n_surface"]), g["ni"], g["nj"])


def prepare_baseline(cfg, log=print):
    t0 = time.perf_counter()
    params = cfg.blade_params()
    grid = build_grid(cfg, params)
    flow = cfg.flow_config()
    sol = solve_primal(grid, flow, raise_on_fail=True)
    base = Baseline(params, grid, sol, MorphOperator(grid))
    base.timings["primal"] = time.perf_counter() - t0
    log(f"baseline primal: {sol.iterations_used} iterations, mdot={sol.mass_flow:.8f}, "
        f"Y={sol.pressure_loss:.6f} ({base.timings['primal']:.1f} s)")
    a = cfg["adjoint"]
    for obj in cfg.objectives:
        for var in cfg.variants:
            t1 = time.perf_counter()
            sol_a = adj.solve_adjoint(sol, obj, var, drop_orders=a["drop_orders"], max_iter=a["max_iter"])
            if var == "AD" and not sol_a.converged:
                raise NotConverged(f"AD adjoint for {obj} {sol_a.status}", sol_a)
            fld = adj.mesh_sensitivities(sol, sol_a)
            smap = adj.surface_sensitivities(fld, grid, base.operator)
            base.adjoints[obj, var] = sol_a
            base.fields[obj, var] = fld
            base.maps[obj, var] = smap
            base.timings[f"adjoint_{obj}_{var}"] = time.perf_counter() - t1
            log(f"adjoint {obj}/{var}: {sol_a.status} after {sol_a.iterations_used} iterations "
                f"({base.timings[f'adjoint_{obj}_{var}']:.1f} s)")
    return base


def _clamp_range(cfg):
    c = cfg["clamp"]
    return tuple(c["range"]) if c["enabled"] else (0.0, 1.0)


def eq1_samples(cfg, base):
    b = cfg["batch"]
    for p in ("Stagger", "Thickness"):
        for xi in b["xis"]:
            spec = VariationSpec(p, xi)
            t0 = time.perf_counter()
            prof = generate_profile(apply_variation(base.params, spec), cfg["grid"]["n_surface"])
            if b["eq1_mesh"] == "regenerate":
                g = generate_grid(prof, cfg["grid"]["ni"], cfg["grid"]["nj"])
                yield Sample(spec.label, grid=g, measure_time=time.perf_counter() - t0)
            else:
                d = clamp(DeformationField.from_points(base.grid, prof.points, _clamp_range(cfg)))
                yield Sample(spec.label, deformation=d, measure_time=time.perf_counter() - t0)


def scan_model(cfg, seed):
    b = cfg["batch"]
    chord = cfg.blade_params().chord
    return PerturbationModel(b["sigma_field"], b["correlation_length"], b["sigma_meas"], seed, chord)


def scan_samples(cfg, base):
    b = cfg["batch"]
    n_s = cfg["grid"]["n_surface"]
    dense = generate_profile(base.params, (n_s - 1) * b["refine"] + 1)
    fem = generate_profile(base.params, b["n_fem"]) if b["n_fem"] >= 16 else None
    for k in range(b["size"]):
        t0 = time.perf_counter()
        scan = synthesize_scan(dense, scan_model(cfg, b["seed"] + k), refine=1)
        d, _ = scan_deformation(base.grid, scan, fem, _clamp_range(cfg))
        d = clamp(d)
        yield Sample(f"scan_{k:04d}", deformation=d, measure_time=time.perf_counter() - t0)


def zero_sample(base, cfg):
    return Sample("zero", deformation=DeformationField.zeros(base.grid, _clamp_range(cfg)))


def _solve_deformed(base, grid):
    return solve_primal(grid, base.solution.config, initial=base.solution.state,
                        reference_residual=base.solution.residual_history[0], raise_on_fail=True)


def evaluate_sample(base, sample, objectives, variants, fd_mode="one-sided", mesh_dir=None):
    """Records and timings for one sample; failures become 'failed:<reason>' records."""
    t = {"measure": sample.measure_time}
    try:
        t0 = time.perf_counter()
        preds = {}
        if sample.grid is not None:
            g_def = sample.grid
            dX = np.stack([g_def.x - base.grid.x, g_def.y - base.grid.y])
            for key, fld in base.fields.items():
                preds[key] = fld.directional(dX)
            g_neg = base.grid.with_coords(base.grid.x - dX[0], base.grid.y - dX[1]) \
                if fd_mode == "central" else None
        else:
            for key, smap in base.maps.items():
                preds[key] = adj.predict_delta(smap, sample.deformation)
            t["predict"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            g_def = morph_mesh(base.grid, sample.deformation, base.operator)
            g_neg = morph_mesh(base.grid, sample.deformation.scaled(-1.0), base.operator) \
                if fd_mode == "central" else None
        t.setdefault("predict", time.perf_counter() - t0)
        t["morph"] = time.perf_counter() - t0 if sample.grid is None else 0.0
        if mesh_dir is not None:
            write_mesh(g_def, Path(mesh_dir) / f"sample_{sample.sample_id}.p2d")
        t0 = time.perf_counter()
        sol = _solve_deformed(base, g_def)
        sol_neg = _solve_deformed(base, g_neg) if g_neg is not None else None
        t["resolve"] = time.perf_counter() - t0
    except (NegativeVolume, NotConverged, NonPhysicalState) as exc:
        reason = type(exc).__name__
        logger.warning("sample %s excluded: %s", sample.sample_id, exc)
        recs = [adj.ImpactRecord(sample.sample_id, o, float("nan"), float("nan"), float("nan"), v,
                                 f"failed:{reason}") for o in objectives for v in variants]
        return recs, t, None
    recs = []
    for o in objectives:
        F0 = base.objective(o)
        dnl = sol.objective(o) - F0
        if sol_neg is not None:
            dnl = 0.5 * (sol.objective(o) - sol_neg.objective(o))
        for v in variants:
            recs.append(adj.impact_record(sample.sample_id, o, dnl, preds[o, v], scale=F0, variant=v))
    return recs, t, sol


def _evaluate_star(args):
    return evaluate_sample(*args)


def summarize(records, objectives, variants):
    out = {}
    for o in objectives:
        for v in variants:
            rs = [r for r in records if r.objective_id == o and r.variant == v]
            ok = [r for r in rs if r.status == "ok"]
            dev = np.array([r.deviation_pct for r in ok])
            s = {"n_samples": len(rs), "n_used": len(ok),
                 "n_excluded": len(rs) - len(ok),
                 "excluded": {r.sample_id: r.status for r in rs if r.status != "ok"}}
            if len(ok):
                s.update(median_abs_dev=float(np.median(np.abs(dev))),
                         mean_dev=float(dev.mean()), mean_abs_dev=float(np.abs(dev).mean()),
                         max_abs_dev=float(np.abs(dev).max()),
                         frac_within_10=float(np.mean(np.abs(dev) <= 10.0)))
            if len(ok) >= 2:
                from .report import regression

                x = np.array([r.dF_nonlinear for r in ok])
                y = np.array([r.dF_adjoint for r in ok])
                s["regression"] = regression(x, y)
            out[f"{o}/{v}"] = s
    return out


@dataclass
class CampaignResult:
    run_dir: Path
    records: list
    summary: dict
    exit_code: int
    baseline: Baseline = None


def new_run_dir(cfg, run_dir=None):
    if run_dir is None:
        rid = cfg["run_id"] or datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg["output_dir"]) / rid
    run_dir = Path(run_dir)
    for sub in ("meshes", "solutions", "adjoints", "report"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True))
    (run_dir / "resolved_config.json").write_text(json.dumps(cfg.data, indent=2, sort_keys=True))
    return run_dir


def save_baseline(base, run_dir):
    base.solution.save(run_dir / "solutions" / "baseline.npz")
    base.solution.write_history_csv(run_dir / "solutions" / "baseline_history.csv")
    base.solution.write_station_json(run_dir / "solutions" / "baseline_stations.json")
    write_mesh(base.grid, run_dir / "meshes" / "baseline.p2d")
    for (o, v), a in base.adjoints.items():
        a.save(run_dir / "adjoints" / f"{o}_{v}.npz")
        a.write_history_csv(run_dir / "adjoints" / f"{o}_{v}_history.csv")
        base.maps[o, v].write_csv(run_dir / "adjoints" / f"{o}_{v}_surface.csv")


def run_validate(cfg, run_dir=None, log=print, baseline=None, samples=None, save_meshes=True):
    """Full validation campaign; returns a :class:`CampaignResult`."""
    if not isinstance(cfg, RunConfig):
        cfg = RunConfig.from_dict(cfg)
    run_dir = new_run_dir(cfg, run_dir)
    base = prepare_baseline(cfg, log) if baseline is None else baseline
    save_baseline(base, run_dir)
    objectives, variants = cfg.objectives, cfg.variants
    if samples is None:
        gen = eq1_samples if cfg["batch"]["kind"] == "eq1" else scan_samples
        samples = list(gen(cfg, base))
        if cfg["batch"]["inject_zero"]:
            samples.append(zero_sample(base, cfg))
    mesh_dir = run_dir / "meshes" if save_meshes else None
    jobs = [(base, s, objectives, variants, cfg["fd_mode"], mesh_dir) for s in samples]
    t0 = time.perf_counter()
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as ex:
            results = list(ex.map(_evaluate_star, jobs))
    else:
        results = []
        for k, job in enumerate(jobs):
            results.append(evaluate_sample(*job))
            r0 = results[-1][0][0]
            log(f"[{k + 1}/{len(jobs)}] {r0.sample_id}: {r0.objective_id} dev={r0.deviation_pct:.3f}% "
                f"({r0.status})")
    wall = time.perf_counter() - t0
    records, sample_times = [], []
    for s, (recs, t, sol) in zip(samples, results):
        records.extend(recs)
        sample_times.append(t)
        if sol is not None:
            sol.save(run_dir / "solutions" / f"sample_{s.sample_id}.npz")
    adj.write_records_csv(records, run_dir / "records.csv")
    summary = {"objectives": summarize(records, objectives, variants),
               "baseline": {o: base.objective(o) for o in objectives},
               "adjoint_status": {f"{o}/{v}": {"status": a.status, "iterations": a.iterations_used,
                                               "converged": a.converged}
                                  for (o, v), a in base.adjoints.items()},
               "n_samples": len(samples)}
    cost = cost_summary(base, sample_times, objectives, wall)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (run_dir / "timings.json").write_text(json.dumps(cost, indent=2, sort_keys=True))
    n_bad = sum(1 for r in records if r.status.startswith("failed") or r.status == "degenerate")
    code = EXIT_PARTIAL if n_bad else EXIT_OK
    log(f"campaign finished: {len(samples)} samples, {n_bad} excluded records -> {run_dir}")
    return CampaignResult(run_dir, records, summary, code, base)


def cost_summary(base, sample_times, objectives, wall=None):
    """Batch-adjoint versus batch-nonlinear time from measured pieces (AD adjoints only)."""
    primal = base.timings.get("primal", float("nan"))
    adj_t = sum(base.timings.get(f"adjoint_{o}_AD", 0.0) for o in objectives)
    measure = sum(t.get("measure", 0.0) for t in sample_times)
    predict = sum(t.get("predict", 0.0) for t in sample_times)
    nonlinear = sum(t.get("morph", 0.0) + t.get("resolve", 0.0) for t in sample_times)
    batch_adjoint = primal + adj_t + measure + predict
    batch_nonlinear = primal + measure + nonlinear
    return {"primal_s": primal, "adjoints_s": adj_t, "measure_s": measure, "predict_s": predict,
            "nonlinear_s": nonlinear, "batch_adjoint_s": batch_adjoint,
            "batch_nonlinear_s": batch_nonlinear,
            "batch_ratio": batch_adjoint / batch_nonlinear if batch_nonlinear > 0 else float("nan"),
            "n_samples": len(sample_times), "campaign_wall_s": wall}
