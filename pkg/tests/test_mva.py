import struct

import numpy as np
import pytest

from mvadjoint import mva
from mvadjoint.errors import CovarianceNotPD, DimensionMismatch, PreconditionError, STLFormatError
from mvadjoint.geometry import BladeParams, SurfacePolyline, generate_profile
from mvadjoint.mva import (PerturbationModel, ScanSurface, brute_force_distance, deviation_analysis,
                           map_deviations, read_stl, refine_polyline, synthesize_scan, write_scan_stl)
from mvadjoint.stl import read_stl_triangles, ribbon_triangles, write_stl


@pytest.fixture(scope="module")
def profile():
    return generate_profile(BladeParams(), 41)


@pytest.fixture(scope="module")
def dense():
    return generate_profile(BladeParams(), 161)


def test_model_invariants():
    with pytest.raises(PreconditionError):
        PerturbationModel(sigma_field=0.002, sigma_meas=0.001)
    with pytest.raises(PreconditionError):
        PerturbationModel(correlation_length=0.0)
    with pytest.raises(PreconditionError):
        PerturbationModel(sigma_field=-1.0)


def test_zero_perturbation_is_baseline(profile):
    scan = synthesize_scan(profile, PerturbationModel(0.0, 0.2, 0.0, seed=4), refine=1)
    assert np.array_equal(scan.points, profile.points)


def test_seeded_determinism(profile):
    m = PerturbationModel(seed=11)
    a, b = synthesize_scan(profile, m), synthesize_scan(profile, m)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, synthesize_scan(profile, m.with_seed(12)).points)


def test_scan_denser_than_mesh(profile):
    scan = synthesize_scan(profile, PerturbationModel(seed=1), refine=4)
    h_scan = np.hypot(*np.diff(scan.points, axis=0).T).max()
    h_cfd = np.hypot(*np.diff(profile.points, axis=0).T).min()
    assert h_scan <= 0.5 * h_cfd * 1.1  # node spacing varies a little along the profile


def test_field_marginal_std():
    m = PerturbationModel(sigma_field=0.002, correlation_length=0.2)
    s = np.linspace(0, 1.2, 60)
    f = mva.correlated_field(s, m, np.random.default_rng(0), size=10000)
    assert abs(f[30].std() / 0.002 - 1) < 0.05
    # neighbouring points are strongly correlated, far ones are not
    assert np.corrcoef(f[30], f[31])[0, 1] > 0.95
    assert abs(np.corrcoef(f[0], f[-1])[0, 1]) < 0.05


def test_covariance_retry_then_error(monkeypatch):
    calls = []

    def fail(a):
        calls.append(a)
        raise np.linalg.LinAlgError("not PD")

    monkeypatch.setattr(np.linalg, "cholesky", fail)
    with pytest.raises(CovarianceNotPD):
        mva.correlation_factor(np.linspace(0, 1, 5), 0.2)
    assert len(calls) == 2
    assert np.allclose(calls[1] - calls[0], 1e-12 * np.eye(5))


def test_population_mean_abs_deviation(dense):
    m = PerturbationModel()
    vals = [np.abs(synthesize_scan(dense, m.with_seed(k), refine=1).field).mean() for k in range(102)]
    assert abs(np.mean(vals) / PerturbationModel().expected_abs_deviation - 1) < 0.2


# -- STL -------------------------------------------------------------------

SQUARE = """solid sq
facet normal 0 0 1
 outer loop
  vertex 0 0 0
  vertex 1 0 0
  vertex 1 1 0
 endloop
endfacet
facet normal 0 0 1
 outer loop
  vertex 0 0 0
  vertex 1 1 0
  vertex 0 1 0
 endloop
endfacet
endsolid sq
"""


def test_ascii_two_facets(tmp_path):
    (tmp_path / "sq.stl").write_text(SQUARE)
    tri = read_stl_triangles(tmp_path / "sq.stl")
    assert tri.shape == (2, 3, 3)
    np.testing.assert_array_equal(tri[1], [[0, 0, 0], [1, 1, 0], [0, 1, 0]])


def test_binary_truncated(tmp_path):
    tri = np.zeros((4, 3, 3), dtype="<f4")
    raw = b"x" * 80 + struct.pack("<I", 5)
    for t in tri:
        raw += struct.pack("<3f", 0, 0, 1) + t.tobytes() + b"\0\0"
    (tmp_path / "t.stl").write_bytes(raw)
    with pytest.raises(STLFormatError, match="facet 5") as exc:
        read_stl_triangles(tmp_path / "t.stl")
    assert exc.value.offset == 84 + 4 * 50


def test_malformed_ascii_offset(tmp_path):
    bad = SQUARE.replace("vertex 1 1 0\n  vertex 0 1 0", "vertex 1 one 0\n  vertex 0 1 0")
    (tmp_path / "b.stl").write_text(bad)
    with pytest.raises(STLFormatError, match="#2") as exc:
        read_stl_triangles(tmp_path / "b.stl")
    assert exc.value.offset > 0


def test_mixed_format(tmp_path):
    (tmp_path / "m.stl").write_bytes(b"solid x\n" + b"\x00\x01\x02" * 40)
    with pytest.raises(STLFormatError):
        read_stl_triangles(tmp_path / "m.stl")


@pytest.mark.parametrize("binary", [False, True])
def test_stl_roundtrip(tmp_path, profile, binary):
    scan = ScanSurface(profile.points)
    write_scan_stl(scan, tmp_path / "p.stl", binary=binary)
    back = read_stl(tmp_path / "p.stl")
    assert back.points.shape == profile.points.shape
    assert np.abs(back.points - profile.points).max() < 1e-6


def test_ribbon_write_read_triangles(tmp_path, profile):
    tri = ribbon_triangles(profile.points, 1.0)
    write_stl(tri, tmp_path / "r.stl", binary=True)
    assert np.abs(read_stl_triangles(tmp_path / "r.stl") - tri).max() < 1e-6


# -- deviation analysis ------------------------------------------------------

def test_offset_scan(profile):
    delta = 3e-4
    fine = SurfacePolyline(refine_polyline(profile.points, 4))
    scan = ScanSurface(fine.points + delta * fine.normals)
    res = deviation_analysis(profile, scan)
    # interior nodes: the offset curve is exact up to the chordal error of the fine polyline
    assert np.abs(res.deviation[1:-1] - delta).max() < 1e-10 + 1e-3 * delta
    flat = SurfacePolyline(np.column_stack([np.linspace(0, 1, 21), np.zeros(21)]))
    fl = ScanSurface(refine_polyline(flat.points, 4) + [0.0, delta])
    np.testing.assert_allclose(deviation_analysis(flat, fl).deviation, delta, rtol=0, atol=1e-10)


def test_identity_scan(profile):
    res = deviation_analysis(profile, ScanSurface(refine_polyline(profile.points, 4)))
    assert np.abs(res.deviation).max() < 1e-12 and not res.flags.any()


def test_matches_brute_force(profile, dense):
    scan = synthesize_scan(dense, PerturbationModel(seed=5), refine=1)
    res = deviation_analysis(profile, scan)
    ref = brute_force_distance(profile, scan)
    assert np.abs(res.deviation - ref).max() < scan.sigma_meas


def test_no_intersection_flagged():
    nodes = SurfacePolyline(np.column_stack([np.linspace(0, 1, 5), np.zeros(5)]))
    scan = ScanSurface(np.column_stack([np.linspace(0.0, 0.6, 20), np.full(20, 0.01)]))
    with pytest.warns(UserWarning, match="projection"):
        res = deviation_analysis(nodes, scan)
    assert res.flags.tolist() == [False, False, False, True, True]
    # fallback keeps the normal component of the nearest-point offset
    assert res.deviation[4] == pytest.approx(0.01)


def test_ambiguous_double_hit():
    nodes = SurfacePolyline(np.column_stack([np.linspace(0, 1, 5), np.zeros(5)]))
    # a fold near x = 0.5: the normal ray there crosses the scan twice, 1e-5 apart
    xs = np.array([0.0, 0.52, 0.48, 1.0])
    ys = np.array([1e-4, 1e-4, 1.1e-4, 1.1e-4])
    scan = ScanSurface(np.column_stack([xs, ys]), sigma_meas=2e-5)
    res = deviation_analysis(nodes, scan)
    assert res.ambiguous[2] and not res.ambiguous[0]
    assert res.deviation[2] == pytest.approx(1e-4, abs=1e-12)


def test_deviations_csv(tmp_path, profile):
    res = deviation_analysis(profile, ScanSurface(refine_polyline(profile.points, 2)))
    res.write_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "node_id,arc_fraction,deviation,flag" and len(lines) == 42


# -- mapping -------------------------------------------------------------------

def test_map_pass_through(profile, rng):
    dev = rng.normal(size=41) * 1e-3
    d = map_deviations(dev, profile.arc_fraction, profile.arc_fraction, profile.normals)
    np.testing.assert_array_equal(d.displacement, dev[:, None] * profile.normals)


def test_map_constant(profile):
    fem = generate_profile(BladeParams(), 60)
    d = map_deviations(np.full(60, 2e-3), fem.arc_fraction, profile.arc_fraction, profile.normals)
    np.testing.assert_allclose(d.displacement, 2e-3 * profile.normals, rtol=0, atol=1e-18)


def test_map_linear_midpoints():
    fem_arc = np.linspace(0, 1, 11)
    mid = 0.5 * (fem_arc[1:] + fem_arc[:-1])
    n = np.tile([0.0, 1.0], (10, 1))
    d = map_deviations(3.0 * fem_arc - 1.0, fem_arc, mid, n)
    np.testing.assert_allclose(d.displacement[:, 1], 3.0 * mid - 1.0, rtol=0, atol=1e-15)


def test_map_extrapolation_flagged():
    fem_arc = np.linspace(0.1, 0.9, 5)
    cfd = np.linspace(0, 1, 11)
    d = map_deviations(np.arange(5.0), fem_arc, cfd, np.tile([0.0, 1.0], (11, 1)))
    assert d.flags[0] and d.flags[-1] and not d.flags[5]
    assert d.displacement[0, 1] == 0.0 and d.displacement[-1, 1] == 4.0


def test_map_errors():
    with pytest.raises(DimensionMismatch):
        map_deviations(np.zeros(3), np.linspace(0, 1, 4), np.linspace(0, 1, 5), np.zeros((5, 2)))
    with pytest.raises(PreconditionError):
        map_deviations(np.zeros(3), np.array([0, 0.6, 0.5]), np.linspace(0, 1, 5), np.zeros((5, 2)))
