"""Deviation histograms, adjoint-vs-nonlinear scatter and regression, as CSV and SVG."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy import stats

from ..adjoint import read_records_csv
from ..errors import EmptyRecordSet, MissingArtifact

BIN_WIDTH = 2.5


def regression(x, y):
    """Least-squares fit y = slope * x + intercept with R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0.0:
        return {"slope": float("nan"), "intercept": float("nan"), "r2": float("nan"), "n": len(x)}
    fit = stats.linregress(x, y)
    return {"slope": float(fit.slope), "intercept": float(fit.intercept),
            "r2": float(fit.rvalue ** 2), "n": len(x)}


def histogram(dev, width=BIN_WIDTH):
    """Counts on bins [k w, (k+1) w) covering the data; returns (edges, counts)."""
    dev = np.asarray(dev, dtype=np.float64)
    if len(dev) == 0:
        raise EmptyRecordSet("no samples")
    lo = math.floor(dev.min() / width) * width
    hi = (math.floor(dev.max() / width) + 1) * width
    edges = np.arange(round((hi - lo) / width) + 1) * width + lo
    counts, _ = np.histogram(dev, bins=edges)
    return edges, counts


def _frame(w, h, title):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
            f'<rect width="{w}" height="{h}" fill="white"/>',
            f'<text x="{w / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>']


def histogram_svg(edges, counts, title, w=520, h=320):
    m = 45
    out = _frame(w, h, title)
    cmax = max(int(counts.max()), 1)
    nb = len(counts)
    bw = (w - 2 * m) / nb
    for k, c in enumerate(counts):
        bh = (h - 2 * m) * c / cmax
        out.append(f'<rect x="{m + k * bw:.2f}" y="{h - m - bh:.2f}" width="{bw * 0.95:.2f}" '
                   f'height="{bh:.2f}" fill="#4a7fb5"/>')
    out.append(f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>')
    step = max(1, nb // 8)
    for k in range(0, nb + 1, step):
        x = m + k * bw
        out.append(f'<text x="{x:.1f}" y="{h - m + 14}" text-anchor="middle">{edges[k]:g}</text>')
    out.append(f'<text x="{w / 2}" y="{h - 8}" text-anchor="middle">deviation [%]</text>')
    out.append(f'<text x="{m - 6}" y="{m}" text-anchor="end">{cmax}</text>')
    out.append("</svg>")
    return "\n".join(out)


def scatter_svg(x, y, fit, title, w=420, h=420):
    m = 55
    out = _frame(w, h, title)
    lo = float(min(np.min(x), np.min(y)))
    hi = float(max(np.max(x), np.max(y)))
    if hi == lo:
        hi, lo = lo + 1.0, lo - 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    sx = lambda v: m + (v - lo) / (hi - lo) * (w - 2 * m)
    sy = lambda v: h - m - (v - lo) / (hi - lo) * (h - 2 * m)
    out.append(f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="black"/>')
    out.append(f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
               f'stroke="gray" stroke-dasharray="4 3"/>')
    for a, b in zip(x, y):
        out.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="#c0392b"/>')
    if np.isfinite(fit.get("slope", float("nan"))):
        a, b = fit["slope"], fit["intercept"]
        out.append(f'<line x1="{sx(lo):.2f}" y1="{sy(a * lo + b):.2f}" x2="{sx(hi):.2f}" '
                   f'y2="{sy(a * hi + b):.2f}" stroke="#2c3e50"/>')
        out.append(f'<text x="{m + 6}" y="{m + 14}">slope {a:.4f}, R² {fit["r2"]:.5f}</text>')
    out.append(f'<text x="{w / 2}" y="{h - 15}" text-anchor="middle">ΔF nonlinear</text>')
    out.append(f'<text x="15" y="{h / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {h / 2})">ΔF adjoint</text>')
    out.append(f'<text x="{m}" y="{h - m + 14}">{lo:.3g}</text>')
    out.append(f'<text x="{w - m}" y="{h - m + 14}" text-anchor="end">{hi:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out)


def build_report(run_dir, width=BIN_WIDTH):
    """Write histogram/scatter CSVs, SVGs and regression JSON into ``run_dir/report``."""
    run_dir = Path(run_dir)
    path = run_dir / "records.csv"
    if not path.exists():
        raise MissingArtifact(str(path))
    records = read_records_csv(path)
    if not records:
        raise EmptyRecordSet(f"no samples in {path}")
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    groups = sorted({(r.objective_id, r.variant) for r in records})
    result = {}
    for o, v in groups:
        ok = [r for r in records if r.objective_id == o and r.variant == v and r.status == "ok"]
        tag = f"{o}_{v}"
        if not ok:
            result[f"{o}/{v}"] = {"error": "no samples"}
            continue
        dev = np.array([r.deviation_pct for r in ok])
        edges, counts = histogram(dev, width)
        with open(out / f"histogram_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for a, b, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{a:g}", f"{b:g}", int(c)])
        x = np.array([r.dF_nonlinear for r in ok])
        y = np.array([r.dF_adjoint for r in ok])
        with open(out / f"scatter_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "dF_nonlinear", "dF_adjoint"])
            for r in ok:
                w.writerow([r.sample_id, repr(r.dF_nonlinear), repr(r.dF_adjoint)])
        fit = regression(x, y)
        (out / f"histogram_{tag}.svg").write_text(histogram_svg(edges, counts, f"{o} ({v}) deviation"))
        (out / f"scatter_{tag}.svg").write_text(scatter_svg(x, y, fit, f"{o} ({v})"))
        result[f"{o}/{v}"] = {"regression": fit, "n": len(ok),
                              "mean_dev": float(dev.mean()),
                              "median_abs_dev": float(np.median(np.abs(dev))),
                              "frac_within_10": float(np.mean(np.abs(dev) <= 10.0))}
    (out / "regression.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def sensitivity_zones(arc, g, n=3):
    """Arc fractions of the ``n`` largest |g| local extrema."""
    g = np.asarray(g)
    mag = np.abs(g)
    peaks = [k for k in range(len(g))
             if (k == 0 or mag[k] >= mag[k - 1]) and (k == len(g) - 1 or mag[k] >= mag[k + 1])]
    peaks = sorted(peaks, key=lambda k: -mag[k])[:n]
    return [{"arc_fraction": float(arc[k]), "g_normal": float(g[k]),
             "direction": "outward increases J" if g[k] > 0 else "inward increases J"} for k in peaks]


def sensitivity_svg(arc, g, title, zones=(), w=560, h=320):
    """Signed normal sensitivity along the arc: red where outward movement raises J, blue otherwise."""
    m = 50
    out = _frame(w, h, title)
    gmax = float(np.max(np.abs(g))) or 1.0
    sx = lambda a: m + a * (w - 2 * m)
    sy = lambda v: h / 2 - v / gmax * (h / 2 - m)
    out.append(f'<line x1="{m}" y1="{h / 2}" x2="{w - m}" y2="{h / 2}" stroke="black"/>')
    bw = (w - 2 * m) / max(len(g), 1)
    for a, v in zip(arc, g):
        color = "#c0392b" if v > 0 else "#2e6fb5"
        y0, y1 = sorted((sy(0.0), sy(v)))
        out.append(f'<rect x="{sx(a) - bw / 2:.2f}" y="{y0:.2f}" width="{bw * 0.9:.2f}" '
                   f'height="{y1 - y0:.2f}" fill="{color}"/>')
    for z in zones:
        x = sx(z["arc_fraction"])
        out.append(f'<line x1="{x:.2f}" y1="{m}" x2="{x:.2f}" y2="{h - m}" stroke="gray" stroke-dasharray="3 3"/>')
        out.append(f'<text x="{x:.2f}" y="{m - 4}" text-anchor="middle">{z["arc_fraction"]:.2f}</text>')
    out.append(f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle">arc fraction (leading edge = 0)</text>')
    out.append(f'<text x="{m - 4}" y="{m}" text-anchor="end">{gmax:.2e}</text>')
    out.append("</svg>")
    return "\n".join(out)
