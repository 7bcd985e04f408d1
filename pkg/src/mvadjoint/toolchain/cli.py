"""``mvadjoint`` command line.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure,
4 campaign finished with excluded samples.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import adjoint as adj
from ..errors import (ConfigError, CovarianceNotPD, DegenerateDenominator, MVAdjointError,
                      NegativeVolume, NonPhysicalState, NotConverged, PrimalNotConverged)
from ..euler import load_state, solve_primal
from ..geometry import SurfacePolyline, generate_profile, write_profile_csv
from ..grid import read_mesh, write_mesh
from ..morph import MorphOperator, clamp, morph_mesh
from ..mva import (deviation_analysis, map_deviations, read_stl, synthesize_scan, write_scan_stl)
from . import bench as bench_mod
from . import campaign, report
from .config import RunConfig

NUMERIC = (NotConverged, NonPhysicalState, NegativeVolume, PrimalNotConverged, DegenerateDenominator,
           CovarianceNotPD)


def _config(args):
    return RunConfig.load(args.config) if args.config else RunConfig.from_dict({})


def _grid(args, cfg):
    if getattr(args, "mesh", None):
        return read_mesh(args.mesh)
    return campaign.build_grid(cfg)


def _out(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _primal(args, cfg, grid):
    if getattr(args, "solution", None):
        from ..euler import FlowSolution, residual, station_averages, l1_norm

        flow = cfg.flow_config()
        U = load_state(args.solution, grid)
        r = l1_norm(residual(grid.x, grid.y, U, flow))
        return FlowSolution(grid, flow, U, np.array([r]), True, 0, station_averages(U, grid, flow))
    return solve_primal(grid, cfg.flow_config(), raise_on_fail=True)


def cmd_gen_case(args):
    cfg = _config(args)
    out = _out(args.out)
    prof = generate_profile(cfg.blade_params(), cfg["grid"]["n_surface"])
    grid = campaign.build_grid(cfg)
    write_profile_csv(prof, out / "profile.csv")
    write_mesh(grid, out / "mesh.p2d", binary=args.binary)
    print(f"wrote {out / 'profile.csv'} and {out / 'mesh.p2d'} ({grid.ni} x {grid.nj} nodes)")
    return 0


def cmd_solve(args):
    cfg = _config(args)
    grid = _grid(args, cfg)
    out = _out(args.out)
    sol = solve_primal(grid, cfg.flow_config())
    sol.save(out / "solution.npz")
    sol.write_history_csv(out / "history.csv")
    sol.write_station_json(out / "stations.json")
    drop = np.log10(sol.residual_history[0] / sol.residual_history[-1])
    print(f"converged={sol.converged} iterations={sol.iterations_used} drop={drop:.2f} orders "
          f"mdot={sol.mass_flow:.10f} Y={sol.pressure_loss:.8f}")
    return 0 if sol.converged else 3


def cmd_adjoint(args):
    cfg = _config(args)
    grid = _grid(args, cfg)
    out = _out(args.out)
    sol = _primal(args, cfg, grid)
    a = adj.solve_adjoint(sol, args.objective, args.variant, drop_orders=cfg["adjoint"]["drop_orders"],
                          max_iter=cfg["adjoint"]["max_iter"])
    tag = f"{args.objective}_{args.variant}"
    a.save(out / f"adjoint_{tag}.npz")
    a.write_history_csv(out / f"adjoint_{tag}_history.csv")
    smap = adj.surface_sensitivities(adj.mesh_sensitivities(sol, a), grid, MorphOperator(grid))
    smap.write_csv(out / f"surface_{tag}.csv")
    print(f"{tag}: {a.status} after {a.iterations_used} iterations; wrote {out / f'surface_{tag}.csv'}")
    if args.variant == "AD" and not a.converged:
        return 3
    return 0


def cmd_scan_gen(args):
    cfg = _config(args)
    b = cfg["batch"]
    dense = generate_profile(cfg.blade_params(), (cfg["grid"]["n_surface"] - 1) * b["refine"] + 1)
    seed = b["seed"] if args.seed is None else args.seed
    scan = synthesize_scan(dense, campaign.scan_model(cfg, seed), refine=1)
    write_scan_stl(scan, args.out, binary=args.binary)
    print(f"wrote {args.out} ({scan.n_points} points, seed {seed})")
    return 0


def _fem_nodes(cfg):
    return generate_profile(cfg.blade_params(), cfg["batch"]["n_fem"])


def cmd_deviate(args):
    cfg = _config(args)
    res = deviation_analysis(_fem_nodes(cfg), read_stl(args.scan))
    res.write_csv(args.out)
    print(f"wrote {args.out}: {len(res.deviation)} nodes, max |dev| {np.abs(res.deviation).max():.3e}, "
          f"{int(res.flags.sum())} flagged")
    return 0


def _read_deviations(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["arc_fraction"]) for r in rows]),
            np.array([float(r["deviation"]) for r in rows]))


def _mapped(args, cfg, grid):
    arc, dev = _read_deviations(args.deviations)
    cfd = SurfacePolyline(grid.surface_points)
    rng = tuple(cfg["clamp"]["range"]) if cfg["clamp"]["enabled"] else (0.0, 1.0)
    return clamp(map_deviations(dev, arc, cfd.arc_fraction, cfd.normals, rng))


def cmd_morph(args):
    cfg = _config(args)
    grid = _grid(args, cfg)
    d = _mapped(args, cfg, grid)
    new = morph_mesh(grid, d)
    write_mesh(new, args.out, binary=args.binary)
    print(f"wrote {args.out} (max |d| {d.max_abs:.3e})")
    return 0


def cmd_predict(args):
    cfg = _config(args)
    grid = _grid(args, cfg)
    d = _mapped(args, cfg, grid)
    with open(args.sensitivity, newline="") as fh:
        rows = list(csv.DictReader(fh))
    g = np.array([[float(r["g_x"]), float(r["g_y"])] for r in rows])
    smap = adj.SurfaceSensitivity(g, SurfacePolyline(grid.surface_points).normals,
                                  np.array([float(r["arc_fraction"]) for r in rows]))
    print(f"dF_adjoint = {adj.predict_delta(smap, d):.12e}")
    return 0


def cmd_validate(args):
    cfg = _config(args)
    res = campaign.run_validate(cfg, run_dir=args.run_dir)
    for key, s in res.summary["objectives"].items():
        if "median_abs_dev" in s:
            print(f"{key}: median |dev| {s['median_abs_dev']:.3f}%, max |dev| {s['max_abs_dev']:.3f}%, "
                  f"{s['n_excluded']} excluded")
    return res.exit_code


def cmd_report(args):
    result = report.build_report(args.run_dir, args.bin_width)
    for key, r in result.items():
        if "regression" in r:
            f = r["regression"]
            print(f"{key}: n={r['n']} slope={f['slope']:.4f} intercept={f['intercept']:.3e} "
                  f"R2={f['r2']:.5f} within10={100 * r['frac_within_10']:.1f}%")
        else:
            print(f"{key}: {r['error']}")
    return 0


def cmd_bench(args):
    cfg = _config(args)
    grid = campaign.build_grid(cfg)
    rep, _ = bench_mod.bench_solver(grid, cfg.flow_config(), cfg.objectives)
    if args.run_dir:
        t = Path(args.run_dir) / "timings.json"
        if not t.exists():
            from ..errors import MissingArtifact

            raise MissingArtifact(str(t))
        bench_mod.add_campaign_timings(rep, json.loads(t.read_text()))
    out = Path(args.out)
    rep.write(out)
    print("\n".join(rep.lines()))
    return 0


def cmd_sensitivity_map(args):
    cfg = _config(args)
    grid = _grid(args, cfg)
    out = _out(args.out)
    sol = _primal(args, cfg, grid)
    a = adj.solve_adjoint(sol, args.objective, args.variant)
    smap = adj.surface_sensitivities(adj.mesh_sensitivities(sol, a), grid, MorphOperator(grid))
    tag = f"{args.objective}_{args.variant}"
    smap.write_csv(out / f"sensitivity_{tag}.csv")
    zones = report.sensitivity_zones(smap.arc_fraction, smap.g_normal)
    (out / f"sensitivity_{tag}.svg").write_text(
        report.sensitivity_svg(smap.arc_fraction, smap.g_normal, f"{args.objective} surface sensitivity",
                               zones))
    (out / f"sensitivity_{tag}_zones.json").write_text(json.dumps(zones, indent=2))
    for z in zones:
        print(f"|g| peak at arc {z['arc_fraction']:.3f}: g_n={z['g_normal']:.3e} ({z['direction']})")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mvadjoint", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True, mesh=False):
        s = sub.add_parser(name, help=help_)
        if config:
            s.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        if mesh:
            s.add_argument("--mesh", help="mesh file instead of the generated baseline grid")
        s.set_defaults(func=fn)
        return s

    s = add("gen-case", cmd_gen_case, "write baseline profile and mesh")
    s.add_argument("--out", default="case")
    s.add_argument("--binary", action="store_true")
    s = add("solve", cmd_solve, "primal flow solution", mesh=True)
    s.add_argument("--out", default="solution")
    for name, fn, h in (("adjoint", cmd_adjoint, "adjoint solution and surface sensitivities"),
                        ("sensitivity-map", cmd_sensitivity_map, "surface sensitivity map (CSV + SVG)")):
        s = add(name, fn, h, mesh=True)
        s.add_argument("--objective", default="MassFlow", choices=["MassFlow", "PressureLossY"])
        s.add_argument("--variant", default="AD", choices=["AD", "HD"])
        s.add_argument("--solution", help="converged state (.npz) to reuse")
        s.add_argument("--out", default="adjoint" if name == "adjoint" else "sensitivity")
    s = add("scan-gen", cmd_scan_gen, "synthesize one scan as STL")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--binary", action="store_true")
    s = add("deviate", cmd_deviate, "normal deviations of a scan at the measurement nodes")
    s.add_argument("--scan", required=True)
    s.add_argument("--out", required=True)
    s = add("morph", cmd_morph, "map deviations to the CFD surface and morph the mesh", mesh=True)
    s.add_argument("--deviations", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--binary", action="store_true")
    s = add("predict", cmd_predict, "adjoint prediction of the objective change", mesh=True)
    s.add_argument("--deviations", required=True)
    s.add_argument("--sensitivity", required=True, help="surface CSV written by 'adjoint'")
    s = add("validate", cmd_validate, "run a validation campaign")
    s.add_argument("--run-dir")
    s = add("report", cmd_report, "histograms, scatter and regression of a campaign", config=False)
    s.add_argument("run_dir")
    s.add_argument("--bin-width", type=float, default=report.BIN_WIDTH)
    s = add("bench", cmd_bench, "cost report")
    s.add_argument("--run-dir", help="campaign whose timings give the batch ratio")
    s.add_argument("--out", default="cost.json")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (MVAdjointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
