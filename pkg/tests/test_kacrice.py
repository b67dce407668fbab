import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import iv

from stochgbc.ensemble import builtin_drift, builtin_ensembles, sphere2_tangent, torus_flat
from stochgbc.geometry import (
    connection_coeffs,
    euler_components,
    frame_jets_of_sample,
    ortho_frame,
    planar_rotation_field,
)
from stochgbc.kacrice import (
    complement_signs,
    conditional_law,
    current_components,
    expected_current_density,
    jacobian_and_G,
    kacrice_density,
)
from stochgbc.manifold import integrate_top_form
from stochgbc.testforms import get_test_form


def points(basis, n, seed=0):
    return basis.manifold.chart.random_points(n, np.random.default_rng(seed), margin=0.05)


def drift_sweep_rhs(a):
    """∫ cos x¹ cos x² against the expected current of torus2_flat drifted by a(sin x¹, sin x²)."""
    c = a * a / 6
    return a * a / (6 * math.pi) * (math.pi * math.exp(-c / 2) * (iv(0, c / 2) + iv(1, c / 2))) ** 2


def test_centered_conditional_law_is_law_of_covariant_derivative():
    b = sphere2_tangent()
    fr = ortho_frame(b)
    x = np.array([0.9, 2.0])
    law = conditional_law(b, fr, x)
    assert np.all(law.mean == 0)
    assert law.gaussian_density == pytest.approx(1 / (2 * math.pi))
    N = 200_000
    c = np.random.default_rng(3).standard_normal((N, b.size))
    u, du = frame_jets_of_sample(fr, x, c @ b.value(x), np.einsum("nk,kai->nai", c, b.grad(x)))
    nabla = du - np.einsum("iab,nb->nai", moment(fr, x), u)
    prod = np.einsum("nai,nbj->naibj", nabla, nabla)
    se = prod.std(axis=0, ddof=1) / math.sqrt(N)
    assert np.all(np.abs(prod.mean(axis=0) - law.covariance) <= 4.5 * se + 1e-12)


def moment(frame, x):
    """``M_i = E[∂_i u uᵀ] = -Γ_i``, the regression coefficient of ``∂_i u`` on ``u``."""
    return -connection_coeffs(frame, x)


def test_conditional_covariance_rejection_sampling():
    b = sphere2_tangent()
    fr = ortho_frame(b)
    x = np.array([1.3, 0.4])
    law = conditional_law(b, fr, x)
    N = 2_000_000
    c = np.random.default_rng(4).standard_normal((N, b.size))
    u, du = frame_jets_of_sample(fr, x, c @ b.value(x), np.einsum("nk,kai->nai", c, b.grad(x)))
    keep = np.linalg.norm(u, axis=1) < 0.05
    du = du[keep]
    n = len(du)
    assert n > 1000
    emp = np.einsum("nai,nbj->aibj", du, du) / n
    se = np.einsum("nai,nbj->naibj", du, du).std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(emp - law.covariance) <= 5 * se + 1e-3)


def test_drift_vanishing_at_point_gives_covariant_derivative_mean():
    b = torus_flat(2)
    fr = ortho_frame(b)
    drift = builtin_drift("sinsin", 1.7)
    x = np.array([0.0, math.pi])
    law = conditional_law(b, fr, x, drift)
    np.testing.assert_allclose(law.drift_value, 0.0, atol=1e-15)
    expected = drift.grad(x) / math.sqrt(3.0)  # P = I/√3, flat connection
    np.testing.assert_allclose(law.mean, expected, atol=1e-14)


def test_flat_isotropic_density_is_zero():
    b = torus_flat(2)
    assert np.all(np.abs(kacrice_density(b, ortho_frame(b), points(b, 5))) < 1e-15)


@pytest.mark.parametrize("name", ["sphere2_tangent", "torus3_trig"])
def test_kacrice_equals_pfaffian_density(name):
    b = builtin_ensembles(name)
    fr = ortho_frame(b)
    x = points(b, 20, 7)
    kr = current_components(b, fr, x)
    pf = euler_components(fr, x)
    np.testing.assert_allclose(kr, pf, rtol=1e-6, atol=1e-12)
    for k in range(kr.shape[-1]):
        assert np.abs(pf[:, k]).max() > 1e-3


def test_kacrice_density_with_index_sets():
    b = builtin_ensembles("torus3_trig")
    fr = ortho_frame(b)
    x = points(b, 4, 2)
    comps = current_components(b, fr, x)
    for k, I in enumerate([(0, 1), (0, 2), (1, 2)]):
        np.testing.assert_allclose(kacrice_density(b, fr, x, I) / (2 * math.pi), comps[:, k], rtol=1e-13)
    with pytest.raises(ValueError):
        kacrice_density(b, fr, x, (0,))


def test_kacrice_monte_carlo_regression():
    b = sphere2_tangent()
    fr = ortho_frame(b)
    x = np.array([2.2, 5.0])
    N = 400_000
    c = np.random.default_rng(8).standard_normal((N, b.size))
    u, du = frame_jets_of_sample(fr, x, c @ b.value(x), np.einsum("nk,kai->nai", c, b.grad(x)))
    nabla = du - np.einsum("iab,nb->nai", moment(fr, x), u)
    dets = np.linalg.det(nabla)
    se = dets.std(ddof=1) / math.sqrt(N)
    assert abs(dets.mean() - kacrice_density(b, fr, x)) < 4 * se


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), use_drift=st.booleans())
def test_density_frame_independent(seed, use_drift):
    b = sphere2_tangent() if not use_drift else torus_flat(2)
    drift = builtin_drift("sinsin", 0.8) if use_drift else None
    rng = np.random.default_rng(seed)
    a0, a1 = rng.normal(size=2)
    rot = planar_rotation_field(
        lambda x: a0 * np.sin(x[..., 0]) + a1 * np.cos(x[..., 1]),
        lambda x: np.stack([a0 * np.cos(x[..., 0]), -a1 * np.sin(x[..., 1])], axis=-1),
        lambda x: np.stack([np.stack([-a0 * np.sin(x[..., 0]), 0 * x[..., 0]], -1),
                            np.stack([0 * x[..., 0], -a1 * np.cos(x[..., 1])], -1)], -2))
    x = points(b, 3, seed)
    r0 = kacrice_density(b, ortho_frame(b), x, drift=drift)
    r1 = kacrice_density(b, ortho_frame(b).rotated(rot), x, drift=drift)
    np.testing.assert_allclose(r0, r1, atol=1e-8)


def test_sphere_expected_current_integrates_to_two():
    b = sphere2_tangent()
    fr = ortho_frame(b)
    one = get_test_form("const", 2)
    total = integrate_top_form(b.manifold, lambda x: expected_current_density(b, fr, x, one),
                               chart_coefficient=True)
    assert total == pytest.approx(2.0, abs=1e-6)
    zsq = get_test_form("zsq", 2)
    total = integrate_top_form(b.manifold, lambda x: expected_current_density(b, fr, x, zsq),
                               chart_coefficient=True)
    assert total == pytest.approx(2 / 3, abs=1e-6)


def test_drift_density_hand_expansion():
    b = torus_flat(2)
    fr = ortho_frame(b)
    a = 1.3
    x = points(b, 6, 1)
    eta = get_test_form("const", 2)
    got = expected_current_density(b, fr, x, eta, builtin_drift("sinsin", a))
    s1, s2 = np.sin(x[:, 0]), np.sin(x[:, 1])
    expected = (np.exp(-a * a * (s1**2 + s2**2) / 6) / (2 * math.pi)
                * a * a / 3 * np.cos(x[:, 0]) * np.cos(x[:, 1]))
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("a", [0.0, 0.5, 1.0, 2.0])
def test_drift_sweep_rhs_quadrature_matches_bessel_formula(a):
    b = torus_flat(2)
    fr = ortho_frame(b)
    eta = get_test_form("cosx1cosx2", 2)
    drift = builtin_drift("sinsin", a)
    got = integrate_top_form(b.manifold, lambda x: expected_current_density(b, fr, x, eta, drift),
                             chart_coefficient=True)
    assert got == pytest.approx(drift_sweep_rhs(a), abs=1e-10)


def test_zero_drift_equals_centered():
    b = sphere2_tangent()
    fr = ortho_frame(b)
    x = points(b, 5)
    zero = builtin_drift("constant", 0.0)
    # a constant reference vector is not a section of TS², but amplitude 0 is
    np.testing.assert_array_equal(current_components(b, fr, x, zero), current_components(b, fr, x))


def test_drift_continuity_in_amplitude():
    b = torus_flat(2)
    fr = ortho_frame(b)
    x = points(b, 5)
    eta = get_test_form("const", 2)
    base = expected_current_density(b, fr, x, eta)
    near = expected_current_density(b, fr, x, eta, builtin_drift("sinsin", 1e-6))
    assert np.abs(near - base).max() < 1e-11


def test_large_drift_minor_approaches_det_of_mean():
    b = builtin_ensembles("torus3_trig")
    fr = ortho_frame(b)
    x = points(b, 3)
    drift = builtin_drift("sinsin", 1e3)
    law = conditional_law(b, fr, x, drift)
    rho = kacrice_density(b, fr, x, drift=drift)
    np.testing.assert_allclose(rho / np.linalg.det(law.mean[:, :, :2]), 1.0, rtol=1e-4)
    # and the Gaussian density factor at the drift suppresses the current
    big = builtin_drift("constant", 40.0)
    assert np.abs(current_components(b, fr, x, big)).max() < 1e-60


def test_degree_mismatch():
    b = sphere2_tangent()
    with pytest.raises(ValueError):
        expected_current_density(b, ortho_frame(b), points(b, 2), get_test_form("dx3", 3))


def test_complement_signs():
    assert complement_signs(3, 1) == [((0,), (1, 2), 1), ((1,), (0, 2), -1), ((2,), (0, 1), 1)]
    assert complement_signs(2, 0) == [((), (0, 1), 1)]


def test_jacobian_examples():
    jac, G = jacobian_and_G(np.hstack([np.eye(2), np.zeros((2, 1))]))
    assert jac == pytest.approx(1.0) and G == pytest.approx(1.0)
    assert jacobian_and_G(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]))[1] == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), r=st.integers(1, 3), extra=st.integers(0, 2))
def test_jacobian_cauchy_binet_and_bound(seed, r, extra):
    m = r + extra
    T = np.random.default_rng(seed).standard_normal((r, m))
    jac, G = jacobian_and_G(T)
    minors = [np.linalg.det(T[:, list(J)]) for J in itertools.combinations(range(m), r)]
    assert jac**2 == pytest.approx(sum(d * d for d in minors), rel=1e-10)
    assert abs(G) <= 1.0
    for J in itertools.combinations(range(m), r):
        assert abs(jacobian_and_G(T, J)[1]) <= 1.0
