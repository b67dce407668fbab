import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochgbc.ensemble import (
    SectionSample,
    builtin_drift,
    builtin_ensembles,
    rng_stream,
    sample,
    sphere2_tangent,
    torus_flat,
)
from stochgbc.geometry import ortho_frame, planar_rotation_field
from stochgbc.testforms import get_test_form
from stochgbc.zeroloc import (
    ExtractionError,
    SectionField,
    ZeroLocator,
    coarea_check,
    evaluate_current,
    find_zero_points,
    trace_zero_curves,
)


@pytest.fixture(scope="module")
def sphere():
    b = sphere2_tangent()
    return b, ZeroLocator(ortho_frame(b))


@pytest.fixture(scope="module")
def trig3():
    b = builtin_ensembles("torus3_trig")
    return b, ZeroLocator(ortho_frame(b))


def coordinate_circles():
    """``u = (sin x¹, sin x²)`` on T³ inside the flat family."""
    b = torus_flat(3)
    c = np.zeros(b.size)
    c[2] = 1.0       # sin x¹ e_0
    c[7 + 4] = 1.0   # sin x² e_1
    return b, SectionSample(c, b)


def rotation():
    return planar_rotation_field(
        lambda x: np.sin(x[..., 0]) + 0.7 * np.cos(x[..., 1]),
        lambda x: np.stack([np.cos(x[..., 0]), -0.7 * np.sin(x[..., 1])], axis=-1),
        lambda x: np.stack([np.stack([-np.sin(x[..., 0]), 0 * x[..., 0]], -1),
                            np.stack([0 * x[..., 0], -0.7 * np.cos(x[..., 1])], -1)], -2))


# -- point case ---------------------------------------------------------------


def test_single_ambient_field_has_two_positive_zeros(sphere):
    b, loc = sphere
    zeros = loc.points(SectionSample(np.array([1.0, 0.0, 0.0]), b))
    assert [z.sign for z in zeros] == [1, 1]
    locs = sorted(tuple(z.location) for z in zeros)
    np.testing.assert_allclose(locs, [(math.pi / 2, 0.0), (math.pi / 2, math.pi)], atol=1e-10)


def test_sphere_samples_have_signed_total_two(sphere):
    b, loc = sphere
    for k in range(40):
        zeros = loc.points(sample(b, rng_stream(11, k)))
        assert sum(z.sign for z in zeros) == 2
        assert all(z.newton_residual <= 1e-10 for z in zeros)
        assert all(abs(z.jacobian_det) >= 1e-6 for z in zeros)
        assert evaluate_current(zeros, get_test_form("const", 2)) == 2.0


def test_zero_residuals_and_separation(sphere):
    b, loc = sphere
    s = sample(b, rng_stream(5, 0))
    zeros = loc.points(s)
    P = ortho_frame(b).jet(np.array([z.location for z in zeros]))[0].P
    u = np.einsum("nab,nb->na", P, s(np.array([z.location for z in zeros])))
    assert np.abs(u).max() <= 1e-10
    for i in range(len(zeros)):
        for j in range(i):
            d = b.manifold.chart.displacement(zeros[i].location, zeros[j].location)
            assert np.linalg.norm(d) > loc.dedup_radius


def test_doubling_scan_grid_keeps_signed_counts(sphere):
    b, loc = sphere
    fine = ZeroLocator(ortho_frame(b), scan_resolution=2 * loc.scan_resolution)
    for k in range(100):
        s = sample(b, rng_stream(12, k))
        assert sum(z.sign for z in loc.points(s)) == sum(z.sign for z in fine.points(s))


def test_signs_invariant_under_frame_rotation(sphere):
    b, loc = sphere
    rotated = ZeroLocator(ortho_frame(b).rotated(rotation()))
    for k in range(10):
        s = sample(b, rng_stream(13, k))
        a, r = loc.points(s), rotated.points(s)
        assert [z.sign for z in a] == [z.sign for z in r]
        np.testing.assert_allclose([z.location for z in a], [z.location for z in r], atol=1e-12)


def test_negated_section_has_identical_oriented_zeros(sphere):
    b, loc = sphere
    s = sample(b, rng_stream(14, 0))
    neg = SectionSample(-s.coefficients, b)
    assert [(tuple(z.location), z.sign) for z in loc.points(s)] == \
        [(tuple(z.location), z.sign) for z in loc.points(neg)]


def test_odd_function_averages_to_zero(sphere):
    b, loc = sphere
    z = get_test_form("z", 2)
    vals = np.array([evaluate_current(loc.points(sample(b, rng_stream(15, k))), z)
                     for k in range(400)])
    assert abs(vals.mean()) < 4 * vals.std(ddof=1) / math.sqrt(len(vals))


def test_nonvanishing_section_has_no_zeros():
    b = torus_flat(2)
    c = np.zeros(b.size)
    c[0] = 1.0
    assert find_zero_points(SectionSample(c, b), ortho_frame(b)) == []
    b3 = torus_flat(3)
    c3 = np.zeros(b3.size)
    c3[0] = 1.0
    assert trace_zero_curves(SectionSample(c3, b3), ortho_frame(b3)) == []


def test_pure_drift_zeros_and_signs():
    b = torus_flat(2)
    s = SectionSample(np.zeros(b.size), b)
    zeros = find_zero_points(s, ortho_frame(b), builtin_drift("sinsin", 1.0))
    got = {(round(z.location[0] / math.pi) % 2, round(z.location[1] / math.pi) % 2): z.sign
           for z in zeros}
    assert got == {(0, 0): 1, (0, 1): -1, (1, 0): -1, (1, 1): 1}


def test_degree_mismatch(sphere):
    b, loc = sphere
    zeros = loc.points(sample(b, rng_stream(1, 0)))
    with pytest.raises(ValueError):
        evaluate_current(zeros, get_test_form("dx3", 3))
    with pytest.raises(ValueError):
        loc.curves(sample(b, rng_stream(1, 0)))


# -- curve case ---------------------------------------------------------------


def test_coordinate_circles_orientation():
    b, s = coordinate_circles()
    curves = trace_zero_curves(s, ortho_frame(b))
    assert len(curves) == 4
    eta = get_test_form("dx3", 3)
    seen = {}
    for curve in curves:
        x0 = curve.points[0]
        key = (round(x0[0] / math.pi) % 2, round(x0[1] / math.pi) % 2)
        np.testing.assert_allclose(np.sin(curve.points[:, :2]), 0.0, atol=1e-12)
        seen[key] = evaluate_current([curve], eta) / (2 * math.pi)
    assert seen == pytest.approx({(0, 0): 1.0, (1, 1): 1.0, (0, 1): -1.0, (1, 0): -1.0},
                                 abs=1e-12)
    assert evaluate_current(curves, eta) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("form", ["dx3", "cosx1_dx2", "sinx1sinx3_dx2", "dx3+sinx1sinx3_dx2"])
def test_coordinate_circles_coarea(form):
    b, s = coordinate_circles()
    direct, coarea = coarea_check(s, ortho_frame(b), get_test_form(form, 3))
    assert direct == pytest.approx(coarea, abs=1e-6)


def test_zero_form_gives_zero_pair():
    b, s = coordinate_circles()
    assert coarea_check(s, ortho_frame(b), get_test_form("dx3", 3, amplitude=0.0)) == (0.0, 0.0)


def test_curve_vertex_invariants(trig3):
    b, loc = trig3
    s = sample(b, rng_stream(21, 3))
    curves = loc.curves(s)
    assert curves
    for curve in curves:
        assert curve.residuals.max() <= 1e-10
        # tangent in ker du and det[a_1; a_2; t] > 0
        assert np.abs(np.einsum("nai,ni->na", curve.jacobians, curve.tangents)).max() < 1e-8
        dets = np.linalg.det(np.concatenate([curve.jacobians, curve.tangents[:, None]], axis=1))
        assert np.all(dets > 0)
        gap = b.manifold.chart.displacement(curve.points[0], curve.points[-1])
        assert np.linalg.norm(gap) < 1e-12
        lattice = (curve.points[-1] - curve.points[0]) / (2 * math.pi)
        np.testing.assert_allclose(lattice, np.round(lattice), atol=1e-12)


@pytest.mark.parametrize("k", range(6))
def test_trig_sample_coarea_agreement(trig3, k):
    b, loc = trig3
    s = sample(b, rng_stream(22, k))
    curves = loc.curves(s)
    direct, coarea = coarea_check(s, loc.frame, get_test_form("dx3+sinx1sinx3_dx2", 3), curves)
    assert abs(direct - coarea) <= 1e-4


def test_step_refinement_converges(trig3):
    b, _ = trig3
    s = sample(b, rng_stream(23, 0))
    eta = get_test_form("cosx1_dx2+sinx1sinx3_dx2", 3)
    vals = [evaluate_current(ZeroLocator(ortho_frame(b), step_fraction=f).curves(s), eta)
            for f in (0.5, 0.25, 0.125)]
    d1, d2 = abs(vals[0] - vals[1]), abs(vals[1] - vals[2])
    assert d2 < 1e-6
    assert d2 <= d1 + 1e-12


def test_curve_orientation_invariant_under_frame_rotation(trig3):
    b, loc = trig3
    rot3 = planar_rotation_field(
        lambda x: np.sin(x[..., 2]) + 0.5 * np.cos(x[..., 0]),
        lambda x: np.stack([-0.5 * np.sin(x[..., 0]), 0 * x[..., 0], np.cos(x[..., 2])], -1),
        lambda x: np.einsum("...,ij->...ij", -0.5 * np.cos(x[..., 0]), np.diag([1.0, 0, 0]))
        + np.einsum("...,ij->...ij", -np.sin(x[..., 2]), np.diag([0, 0, 1.0])))
    rotated = ZeroLocator(ortho_frame(b).rotated(rot3))
    eta = get_test_form("dx3+sinx1sinx3_dx2", 3)
    s = sample(b, rng_stream(24, 1))
    assert evaluate_current(loc.curves(s), eta) == pytest.approx(
        evaluate_current(rotated.curves(s), eta), abs=1e-12)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fast_point_evaluator_matches_basis(seed):
    b = builtin_ensembles("torus3_trig")
    s = sample(b, np.random.default_rng(seed))
    f = SectionField(s)
    x = np.random.default_rng(seed + 1).uniform(0, 2 * math.pi, 3)
    u, J = f.point(x)
    np.testing.assert_allclose(u, s(x), atol=1e-13)
    np.testing.assert_allclose(J, s.jacobian(x), atol=1e-13)


def test_extraction_error_is_runtime_error():
    assert issubclass(ExtractionError, RuntimeError)
