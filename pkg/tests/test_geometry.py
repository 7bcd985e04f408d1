import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvadjoint.errors import PreconditionError, SelfIntersectionError
from mvadjoint.geometry import (XI_VALUES, BladeParams, Parameter, SurfacePolyline, VariationSpec,
                                apply_variation, generate_profile, polygon_centroid, read_profile_csv,
                                variation_suite, write_profile_csv)


def test_flat_profile_lies_on_wall():
    prof = generate_profile(BladeParams(stagger_deg=0.0, max_thickness=0.0), 33)
    assert np.all(prof.y == 0.0)
    assert prof.x[0] == 1.0 and prof.x[-1] == 2.0


def test_peak_thickness_at_bump_position():
    p = BladeParams(stagger_deg=0.0, max_thickness=0.10, bump_position=0.4)
    prof = generate_profile(p, 129)
    k = int(np.argmax(prof.y))
    assert abs(prof.y[k] - 0.10) < 1e-10
    assert abs(prof.x[k] - 1.4) < 1e-12


def test_closed_ends():
    prof = generate_profile(BladeParams(stagger_deg=0.0), 65)
    assert prof.y[0] == 0.0 and abs(prof.y[-1]) < 1e-15


def test_rotation_keeps_centroid():
    base = generate_profile(BladeParams(stagger_deg=0.0), 129)
    rot = generate_profile(BladeParams(stagger_deg=3.14), 129)
    c0, _ = polygon_centroid(base.points)
    c1, _ = polygon_centroid(rot.points)
    np.testing.assert_allclose(c1, c0, atol=1e-10)


def test_too_few_points():
    with pytest.raises(PreconditionError):
        generate_profile(BladeParams(), 15)


def test_self_intersection_rejected():
    with pytest.raises(SelfIntersectionError):
        generate_profile(BladeParams(stagger_deg=0.0, bump_position=0.8), 64)


@pytest.mark.parametrize("kw", [dict(max_thickness=-0.1), dict(bump_position=0.0),
                                dict(bump_position=1.0), dict(chord=0.0)])
def test_params_invariants(kw):
    with pytest.raises(PreconditionError):
        BladeParams(**kw)


def test_apply_variation_examples():
    p = BladeParams(stagger_deg=30.0, max_thickness=0.10)
    assert apply_variation(p, VariationSpec("Stagger", 1.10)).stagger_deg == pytest.approx(33.0, abs=1e-12)
    q = apply_variation(p, VariationSpec(Parameter.THICKNESS, 0.90))
    assert q.max_thickness == pytest.approx(0.09, abs=1e-15)
    assert q.stagger_deg == p.stagger_deg and q.chord == p.chord and q.bump_position == p.bump_position
    assert apply_variation(p, VariationSpec("Stagger", 1.0)) == p


def test_xi_must_be_positive():
    with pytest.raises(PreconditionError):
        VariationSpec("Stagger", 0.0)


@given(st.floats(0.5, 1.5), st.floats(0.5, 1.5), st.sampled_from(list(Parameter)))
def test_variation_composes_multiplicatively(x1, x2, par):
    p = BladeParams(stagger_deg=4.0, max_thickness=0.08)
    twice = apply_variation(apply_variation(p, VariationSpec(par, x1)), VariationSpec(par, x2))
    once = apply_variation(p, VariationSpec(par, x1 * x2))
    for f in ("stagger_deg", "max_thickness"):
        assert getattr(twice, f) == pytest.approx(getattr(once, f), rel=1e-14)


def test_suite():
    suite = variation_suite(BladeParams())
    assert len(suite) == 12
    for par in Parameter:
        assert [s.xi for s in suite if s.parameter_id == par] == [0.90, 0.95, 0.98, 1.02, 1.05, 1.10]
    assert XI_VALUES == (0.90, 0.95, 0.98, 1.02, 1.05, 1.10)
    assert all(s.xi != 1.0 for s in suite)


def test_deterministic():
    a = generate_profile(BladeParams(), 77)
    b = generate_profile(BladeParams(), 77)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.normals, b.normals)


def test_circular_arc_normals():
    R, c = 2.0, np.array([0.3, -1.0])
    th = np.linspace(2.2, 0.9, 41)
    pts = c + R * np.column_stack([np.cos(th), np.sin(th)])
    poly = SurfacePolyline(pts)
    exact = (pts - c) / R
    np.testing.assert_allclose(poly.normals[1:-1], exact[1:-1], atol=1e-8)


def test_polyline_invariants():
    prof = generate_profile(BladeParams(), 41)
    np.testing.assert_allclose(np.hypot(*prof.normals.T), 1.0, atol=1e-12)
    assert prof.arc_fraction[0] == 0.0 and prof.arc_fraction[-1] == 1.0
    assert np.all(np.diff(prof.arc_fraction) > 0)
    # outward normals point into the flow (upwards) at the crest
    assert prof.normals[np.argmax(prof.y), 1] > 0.9


def test_profile_csv_roundtrip(tmp_path):
    prof = generate_profile(BladeParams(), 41)
    write_profile_csv(prof, tmp_path / "p.csv")
    back = read_profile_csv(tmp_path / "p.csv")
    assert np.array_equal(back.points, prof.points)
    assert np.array_equal(back.arc_fraction, prof.arc_fraction)
