"""Cost accounting: adjoint versus primal CPU and memory, batch adjoint versus batch re-solve."""
from __future__ import annotations

import json
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import adjoint as adj
from ..euler import solve_primal


def measure(fn, *args, **kw):
    """(result, wall seconds, CPU seconds, peak traced bytes) of one call."""
    tracemalloc.start()
    tracemalloc.reset_peak()
    c0, t0 = time.process_time(), time.perf_counter()
    try:
        out = fn(*args, **kw)
    finally:
        wall, cpu = time.perf_counter() - t0, time.process_time() - c0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return out, wall, cpu, peak


@dataclass
class CostReport:
    primal_wall_s: float
    primal_cpu_s: float
    primal_peak_bytes: int
    adjoint_wall_s: dict = field(default_factory=dict)
    adjoint_cpu_s: dict = field(default_factory=dict)
    adjoint_peak_bytes: dict = field(default_factory=dict)
    tape_bytes: dict = field(default_factory=dict)
    per_sample_predict_s: float = float("nan")
    per_sample_resolve_s: float = float("nan")
    batch_adjoint_s: float = float("nan")
    batch_nonlinear_s: float = float("nan")
    n_samples: int = 0

    @property
    def adjoint_cpu_ratio(self):
        return {k: v / self.primal_cpu_s for k, v in self.adjoint_cpu_s.items()}

    @property
    def adjoint_memory_ratio(self):
        return {k: v / self.primal_peak_bytes for k, v in self.adjoint_peak_bytes.items()}

    @property
    def batch_ratio(self):
        return self.batch_adjoint_s / self.batch_nonlinear_s

    def to_dict(self):
        d = asdict(self)
        d.update(adjoint_cpu_ratio=self.adjoint_cpu_ratio, adjoint_memory_ratio=self.adjoint_memory_ratio,
                 batch_ratio=self.batch_ratio)
        return d

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def lines(self):
        out = [f"primal: {self.primal_wall_s:.2f} s wall, {self.primal_cpu_s:.2f} s CPU, "
               f"peak {self.primal_peak_bytes / 2**20:.1f} MiB"]
        for k in self.adjoint_wall_s:
            out.append(f"adjoint {k}: {self.adjoint_wall_s[k]:.2f} s wall, CPU ratio "
                       f"{self.adjoint_cpu_ratio[k]:.2f}, memory ratio {self.adjoint_memory_ratio[k]:.2f} "
                       f"(tape {self.tape_bytes.get(k, 0) / 2**20:.1f} MiB)")
        if self.n_samples:
            out.append(f"batch of {self.n_samples}: adjoint route {self.batch_adjoint_s:.1f} s, "
                       f"nonlinear route {self.batch_nonlinear_s:.1f} s, ratio {100 * self.batch_ratio:.2f}%")
        return out


def bench_solver(grid, config, objectives=("MassFlow", "PressureLossY"), variant="AD"):
    """Primal and per-objective adjoint cost on one grid."""
    sol, wall, cpu, peak = measure(solve_primal, grid, config, raise_on_fail=True)
    rep = CostReport(wall, cpu, peak)
    for o in objectives:
        def run():
            a = adj.solve_adjoint(sol, o, variant)
            adj.mesh_sensitivities(sol, a)
            return a
        a, w, c, p = measure(run)
        rep.adjoint_wall_s[o] = w
        rep.adjoint_cpu_s[o] = c
        rep.adjoint_peak_bytes[o] = p
        rep.tape_bytes[o] = a.tape_bytes
    return rep, sol


def add_campaign_timings(report, timings):
    """Fill the batch figures from a campaign's measured ``timings.json`` content."""
    n = max(int(timings["n_samples"]), 1)
    report.n_samples = int(timings["n_samples"])
    report.batch_adjoint_s = timings["batch_adjoint_s"]
    report.batch_nonlinear_s = timings["batch_nonlinear_s"]
    report.per_sample_predict_s = (timings["measure_s"] + timings["predict_s"]) / n
    report.per_sample_resolve_s = timings["nonlinear_s"] / n
    return report
