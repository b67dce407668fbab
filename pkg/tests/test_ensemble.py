import numpy as np
import pytest

from stochgbc.ensemble import (
    ENSEMBLES,
    SectionBasis,
    ampleness_check,
    builtin_drift,
    builtin_ensembles,
    covariance_at,
    covariance_jet_at,
    gram_matrix,
    orthonormalize,
    rng_stream,
    sample,
    sphere2_tangent,
    torus3_trig,
    torus_flat,
    trig_basis,
)
from stochgbc.manifold import builtin_sphere2, builtin_torus


def points(basis, n, seed=0):
    return basis.manifold.chart.random_points(n, np.random.default_rng(seed), margin=0.05)


def fd(fn, x, i, h=1e-5):
    e = np.zeros(x.shape[-1])
    e[i] = h
    return (fn(x + e) - fn(x - e)) / (2 * h)


@pytest.mark.parametrize("name", sorted(ENSEMBLES))
def test_section_derivatives_match_finite_differences(name):
    b = builtin_ensembles(name)
    x = points(b, 6)
    for i in range(b.dim):
        np.testing.assert_allclose(fd(b.value, x, i), b.grad(x)[..., i], atol=1e-8)
        np.testing.assert_allclose(fd(b.grad, x, i), b.hess(x)[..., i], atol=1e-8)
    h = b.hess(x)
    np.testing.assert_array_equal(h, np.swapaxes(h, -1, -2))


@pytest.mark.parametrize("name", sorted(ENSEMBLES))
def test_builtins_are_ample(name):
    rep = ampleness_check(builtin_ensembles(name))
    assert rep.passed and rep.min_singular_value > 0.5


def test_ampleness_failure_reports_point():
    T = np.zeros((2, 2, 5))
    T[0, 0, 0] = 1.0  # second section identically zero, n = r
    b = trig_basis("bad", builtin_torus(2, 20), T)
    rep = ampleness_check(b)
    assert not rep.passed
    assert rep.worst_point.shape == (2,)
    assert ampleness_check(sphere2_tangent(), threshold=0).passed


def test_sphere_covariance_is_inverse_round_metric():
    b = sphere2_tangent()
    x = points(b, 10)
    C = covariance_at(b, x, x)
    expected = np.zeros_like(C)
    expected[:, 0, 0] = 1.0
    expected[:, 1, 1] = 1.0 / np.sin(x[:, 0]) ** 2
    np.testing.assert_allclose(C, expected, atol=1e-13)


@pytest.mark.parametrize("name", sorted(ENSEMBLES))
def test_correlator_symmetry(name):
    b = builtin_ensembles(name)
    x, y = points(b, 8, 1), points(b, 8, 2)
    np.testing.assert_array_equal(covariance_at(b, x, y), np.swapaxes(covariance_at(b, y, x), -1, -2))
    lam = np.linalg.eigvalsh(covariance_at(b, x, x))
    assert lam.min() > 0


@pytest.mark.parametrize("dim", [2, 3])
def test_flat_torus_is_stationary(dim):
    b = torus_flat(dim)
    rng = np.random.default_rng(4)
    x, y = points(b, 5, 3), points(b, 5, 4)
    shift = rng.uniform(0, 6, size=dim)
    np.testing.assert_allclose(covariance_at(b, x + shift, y + shift), covariance_at(b, x, y), atol=1e-12)
    np.testing.assert_allclose(covariance_at(b, x, x), (1 + dim) * np.broadcast_to(np.eye(2), (5, 2, 2)),
                               atol=1e-13)


def test_torus3_trig_is_not_stationary():
    # the coupled family is deliberately non-stationary: a stationary rank-2 family is flat
    b = torus3_trig()
    x, y = points(b, 5, 3), points(b, 5, 4)
    shift = np.array([0.3, 1.1, -0.7])
    assert np.abs(covariance_at(b, x + shift, y + shift) - covariance_at(b, x, y)).max() > 1e-2


def test_constant_sections_have_zero_jet():
    T = np.zeros((2, 2, 5))
    T[0, 0, 0] = T[1, 1, 0] = 1.0
    cj = covariance_jet_at(trig_basis("const", builtin_torus(2), T), points(torus_flat(2), 4))
    for block in (cj.D, cj.Q, cj.H):
        assert np.all(block == 0)


@pytest.mark.parametrize("name", ["sphere2_tangent", "torus3_trig"])
def test_jet_matches_finite_differences_of_covariance(name):
    b = builtin_ensembles(name)
    x = points(b, 4, 5)
    cj = covariance_jet_at(b, x)
    h = 1e-4
    for i in range(b.dim):
        e = np.zeros(b.dim)
        e[i] = h
        # E[∂_i u u(y)ᵀ] at y = x is the x-derivative of C(x, y)
        D_fd = (covariance_at(b, x + e, x) - covariance_at(b, x - e, x)) / (2 * h)
        np.testing.assert_allclose(cj.D[:, i], D_fd, atol=1e-6)
        for j in range(b.dim):
            f = np.zeros(b.dim)
            f[j] = h
            Q_fd = (covariance_at(b, x + e, x + f) - covariance_at(b, x + e, x - f)
                    - covariance_at(b, x - e, x + f) + covariance_at(b, x - e, x - f)) / (4 * h * h)
            np.testing.assert_allclose(cj.Q[:, i, j], Q_fd, rtol=1e-6, atol=1e-6)
            H_fd = (covariance_at(b, x + e + f, x) - covariance_at(b, x + e - f, x)
                    - covariance_at(b, x - e + f, x) + covariance_at(b, x - e - f, x)) / (4 * h * h)
            np.testing.assert_allclose(cj.H[:, i, j], H_fd, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(cj.H, np.swapaxes(cj.H, 1, 2), atol=1e-14)


def test_jet_matches_monte_carlo():
    b = sphere2_tangent()
    x = np.array([1.1, 2.3])
    N = 100_000
    c = np.random.default_rng(7).standard_normal((N, b.size))
    u = c @ b.value(x)
    du = np.einsum("nk,kai->nai", c, b.grad(x))
    cj = covariance_jet_at(b, x)
    prod = np.einsum("nai,nb->niab", du, u)
    se = prod.std(axis=0, ddof=1) / np.sqrt(N)
    assert np.all(np.abs(prod.mean(axis=0) - cj.D) <= 4 * se + 1e-12)
    prod = np.einsum("na,nb->nab", u, u)
    se = prod.std(axis=0, ddof=1) / np.sqrt(N)
    assert np.all(np.abs(prod.mean(axis=0) - cj.C) <= 4 * se)


def test_sampling_is_deterministic_and_centered():
    b = sphere2_tangent()
    s1 = sample(b, rng_stream(42, 3))
    s2 = sample(b, rng_stream(42, 3))
    np.testing.assert_array_equal(s1.coefficients, s2.coefficients)
    assert not np.array_equal(s1.coefficients, sample(b, rng_stream(42, 4)).coefficients)
    x = np.array([0.9, 0.4])
    N = 100_000
    u = np.random.default_rng(1).standard_normal((N, 3)) @ b.value(x)
    assert np.all(np.abs(u.mean(axis=0)) < 4 * np.sqrt(np.diag(covariance_at(b, x, x)) / N))
    emp = u.T @ u / N
    assert np.all(np.abs(emp - covariance_at(b, x, x)) < 4 * np.sqrt(2.0 / N) * 2)


def test_sample_evaluation_is_exact():
    b = torus3_trig()
    s = sample(b, rng_stream(0, 0))
    x = points(b, 3)
    np.testing.assert_allclose(s(x), np.einsum("k,xkr->xr", s.coefficients, b.value(x)), rtol=1e-14)
    assert s.jacobian(x).shape == (3, 2, 3)


def test_orthonormalize_sphere_rescales_only():
    b = sphere2_tangent()
    np.testing.assert_allclose(gram_matrix(b), 8 * np.pi / 3 * np.eye(3), atol=1e-9)
    ob = orthonormalize(b)
    np.testing.assert_allclose(gram_matrix(ob), np.eye(3), atol=1e-8)
    x = points(b, 3)
    np.testing.assert_allclose(ob.value(x), b.value(x) * np.sqrt(3 / (8 * np.pi)), atol=1e-12)


def test_orthonormalize_idempotent_and_scaled():
    ob = orthonormalize(sphere2_tangent())
    again = orthonormalize(ob)
    x = points(ob, 4)
    np.testing.assert_allclose(again.value(x), ob.value(x), atol=1e-8)
    twice = orthonormalize(ob.scaled(2.0))
    np.testing.assert_allclose(twice.value(x), ob.value(x), atol=1e-8)


def _six_section_sphere_basis():
    base = sphere2_tangent()

    def value(x):
        v = base.value(x)
        z = np.cos(np.asarray(x)[..., 0])[..., None, None]
        return np.concatenate([v, z * v], axis=-2)

    def grad(x):
        v, g = base.value(x), base.grad(x)
        th = np.asarray(x)[..., 0]
        z = np.cos(th)[..., None, None, None]
        dz = np.zeros(g.shape)
        dz[..., 0] = -np.sin(th)[..., None, None] * v
        return np.concatenate([g, z * g + dz], axis=-3)

    def hess(x):  # not needed for the Gram matrix
        return np.zeros(np.asarray(x).shape[:-1] + (6, 2, 2, 2))

    return SectionBasis("six", builtin_sphere2(), 2, 6, value, grad, hess,
                        fiber_metric=base.fiber_metric)


def test_orthonormalize_random_sphere_basis():
    M = np.random.default_rng(9).standard_normal((6, 6))
    b = _six_section_sphere_basis().mixed(M)
    ob = orthonormalize(b)
    np.testing.assert_allclose(gram_matrix(ob), np.eye(6), atol=1e-8)


def test_orthonormalize_rejects_dependent_family():
    b = sphere2_tangent()
    M = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0]])
    with pytest.raises(ValueError):
        orthonormalize(b.mixed(M))


def test_unknown_names():
    with pytest.raises(KeyError):
        builtin_ensembles("nope")
    with pytest.raises(KeyError):
        builtin_drift("nope", 1.0)


def test_drift_derivative():
    d = builtin_drift("sinsin", 1.5)
    x = np.array([[0.3, 2.0], [1.0, 4.0]])
    for i in range(2):
        np.testing.assert_allclose(fd(d.value, x, i), d.grad(x)[..., i], atol=1e-8)
