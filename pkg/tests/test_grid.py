import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvadjoint.errors import MeshFormatError, NegativeVolume, PreconditionError
from mvadjoint.geometry import BladeParams, generate_profile
from mvadjoint.grid import (StructuredGrid, boundary_polygon, channel_grid, compute_metrics, generate_grid,
                            read_mesh, shoelace_area, write_mesh)


@pytest.fixture(scope="module")
def baseline():
    return generate_grid(generate_profile(BladeParams(), 41), 121, 41)


def test_flat_grid_uniform_columns():
    g = generate_grid(generate_profile(BladeParams(stagger_deg=0.0, max_thickness=0.0), 41), 65, 17)
    vol = compute_metrics(g).volume
    np.testing.assert_allclose(vol, vol[:, :1] * np.ones_like(vol), rtol=0, atol=1e-10)


def test_baseline_positive_and_conforming(baseline):
    m = compute_metrics(baseline)
    assert (m.volume > 0).all()
    prof = generate_profile(BladeParams(), 41)
    np.testing.assert_allclose(baseline.surface_points, prof.points, atol=1e-10)


def test_too_small():
    prof = generate_profile(BladeParams(), 17)
    with pytest.raises(PreconditionError):
        generate_grid(prof, 4, 17)


def test_unit_square_cell():
    g = StructuredGrid(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[0.0, 1.0], [0.0, 1.0]]))
    m = compute_metrics(g)
    assert m.volume[0, 0] == 1.0
    np.testing.assert_array_equal(m.si[:, 0, 0], [1.0, 0.0])
    np.testing.assert_array_equal(m.si[:, 1, 0], [1.0, 0.0])
    np.testing.assert_array_equal(m.sj[:, 0, 0], [0.0, 1.0])
    np.testing.assert_array_equal(m.sj[:, 0, 1], [0.0, 1.0])


def test_rotation_invariant_volumes(baseline):
    th = 0.7
    x = np.cos(th) * baseline.x - np.sin(th) * baseline.y
    y = np.sin(th) * baseline.x + np.cos(th) * baseline.y
    v0 = compute_metrics(baseline).volume
    v1 = compute_metrics(baseline.with_coords(x, y)).volume
    np.testing.assert_allclose(v1, v0, rtol=0, atol=1e-12)


def test_total_area_matches_boundary_polygon(baseline):
    total = compute_metrics(baseline).volume.sum()
    poly = shoelace_area(boundary_polygon(baseline))
    assert abs(total - poly) <= 1e-10 * poly


def test_negative_volume_index():
    g = channel_grid(8, 4)
    y = g.y.copy()
    y[3, 1] = -0.5
    with pytest.raises(NegativeVolume) as exc:
        compute_metrics(g.with_coords(g.x, y))
    assert tuple(exc.value.index) in {(2, 0), (3, 0)}


def _smooth_grid(seed, ni=12, nj=9):
    r = np.random.default_rng(seed)
    xi, eta = np.meshgrid(np.linspace(0, 1, ni), np.linspace(0, 1, nj), indexing="ij")
    a = r.uniform(-0.03, 0.03, 4)
    x = xi + a[0] * np.sin(np.pi * eta) + a[1] * np.sin(2 * np.pi * xi) * eta
    y = eta + a[2] * np.sin(np.pi * xi) + a[3] * np.cos(np.pi * eta) * xi
    return StructuredGrid(x, y)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10**6))
def test_geometric_conservation_random_grids(seed):
    # 12 grids x 88 cells > 1000 random cells
    m = compute_metrics(_smooth_grid(seed))
    assert np.abs(m.closure()).max() < 1e-12


def test_refinement_keeps_area():
    prof = generate_profile(BladeParams(stagger_deg=0.0, max_thickness=0.0), 17)
    a = compute_metrics(generate_grid(prof, 33, 17)).volume.sum()
    prof2 = generate_profile(BladeParams(stagger_deg=0.0, max_thickness=0.0), 33)
    b = compute_metrics(generate_grid(prof2, 65, 33)).volume.sum()
    assert abs(a - b) < 1e-10 * a


@pytest.mark.parametrize("binary", [False, True])
def test_mesh_roundtrip(baseline, tmp_path, binary):
    path = write_mesh(baseline, tmp_path / "m.p2d", binary=binary)
    back = read_mesh(path)
    assert np.array_equal(back.x, baseline.x) and np.array_equal(back.y, baseline.y)
    assert back.surface_range == baseline.surface_range


def test_text_and_binary_metrics_agree(baseline, tmp_path):
    a = read_mesh(write_mesh(baseline, tmp_path / "a.p2d"))
    b = read_mesh(write_mesh(baseline, tmp_path / "b.p2d", binary=True))
    ma, mb = compute_metrics(a), compute_metrics(b)
    assert np.abs(ma.volume - mb.volume).max() <= 1e-15


@pytest.mark.parametrize("binary", [False, True])
def test_truncated_mesh(tmp_path, binary):
    g = channel_grid(8, 4)
    path = write_mesh(g, tmp_path / "t.p2d", binary=binary)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - (40 if binary else 60)])
    with pytest.raises(MeshFormatError, match="expected 64"):
        read_mesh(path)
