"""Finite-type Gaussian ensembles of sections.

An ensemble is a finite family of sections ``s_1, ..., s_n`` of a rank ``r``
bundle, given by their components in a fixed reference frame of the bundle over
the chart.  A random section is ``u = Σ c_k s_k`` with iid standard normal
coefficients, so its covariance density is ``C(x, y) = Σ_k s_k(x) s_k(y)ᵀ``.

All section callables are vectorized over leading axes of the point array:

* ``value(x)``: ``(..., n, r)``
* ``grad(x)``: ``(..., n, r, m)``, entry ``[k, α, i] = ∂_i s_{kα}``
* ``hess(x)``: ``(..., n, r, m, m)``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .manifold import ManifoldModel, builtin_sphere2, builtin_torus

AMPLENESS_THRESHOLD = 1e-4


def _mixer(M: np.ndarray, fn, trailing: int):
    """Wrap ``fn`` so that its section axis is multiplied by ``M``."""
    def mixed(x):
        arr = fn(x)
        axis = arr.ndim - 1 - trailing
        return np.moveaxis(np.tensordot(M, arr, axes=([1], [axis])), 0, axis)
    return mixed


@dataclass(frozen=True)
class SectionBasis:
    """Sections of a rank-``rank`` bundle with exact first and second derivatives.

    ``fiber_metric(x)`` returns the reference-frame metric ``(..., r, r)`` used
    for L² inner products of sections; ``None`` means the identity.  Samples
    are ``Σ c_k s_k`` with ``c ~ N(0, I_n)``; the L² structure only matters to
    :func:`orthonormalize`.
    """

    name: str
    manifold: ManifoldModel
    rank: int
    size: int
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    fiber_metric: Callable[[np.ndarray], np.ndarray] | None = None
    description: str = ""
    # optional (feature_fn, T) with s_{kα} = Σ_a T[k, α, a] f_a and
    # feature_fn(x) -> (f, ∂f, ∂²f); lets samples be evaluated without the n-axis
    feature_model: tuple | None = None

    def __post_init__(self):
        if self.size < self.rank:
            raise ValueError("an ample family needs at least as many sections as the rank")

    @property
    def dim(self) -> int:
        return self.manifold.dim

    def mixed(self, M, name: str | None = None) -> "SectionBasis":
        """The family ``s'_k = Σ_l M[k, l] s_l``."""
        M = np.array(M, dtype=float)
        if M.ndim != 2 or M.shape[1] != self.size:
            raise ValueError("mixing matrix has the wrong shape")
        M.setflags(write=False)
        features = None
        if self.feature_model is not None:
            fn, T = self.feature_model
            features = (fn, np.einsum("kl,lra->kra", M, T))
        return SectionBasis(name or self.name, self.manifold, self.rank, M.shape[0],
                            _mixer(M, self.value, 1), _mixer(M, self.grad, 2),
                            _mixer(M, self.hess, 3), self.fiber_metric, self.description,
                            features)

    def scaled(self, factor: float) -> "SectionBasis":
        return self.mixed(factor * np.eye(self.size))


@dataclass(frozen=True)
class SectionSample:
    """A random section ``u = Σ_k c_k s_k``, evaluated exactly."""

    coefficients: np.ndarray
    basis: SectionBasis

    def __call__(self, x) -> np.ndarray:
        """Reference-frame components ``(..., r)``."""
        return np.einsum("...kr,k->...r", self.basis.value(x), self.coefficients)

    def jacobian(self, x) -> np.ndarray:
        """``∂_i u_α`` as ``(..., r, m)``."""
        return np.einsum("...kri,k->...ri", self.basis.grad(x), self.coefficients)

    def hessian(self, x) -> np.ndarray:
        return np.einsum("...krij,k->...rij", self.basis.hess(x), self.coefficients)


@dataclass(frozen=True)
class CovarianceJet:
    """Covariance data of ``u`` and its derivatives at coincident points.

    Arrays carry optional leading batch axes.

    * ``C[α, β] = E[u_α u_β]``
    * ``D[i, α, β] = E[∂_i u_α · u_β]``
    * ``Q[i, j, α, β] = E[∂_i u_α · ∂_j u_β]``
    * ``H[i, j, α, β] = E[∂²_{ij} u_α · u_β]``
    """

    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    H: np.ndarray


@dataclass(frozen=True)
class AmplenessReport:
    passed: bool
    min_singular_value: float
    worst_point: np.ndarray
    threshold: float


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def rng_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def sample(basis: SectionBasis, rng: np.random.Generator) -> SectionSample:
    c = rng.standard_normal(basis.size)
    c.setflags(write=False)
    return SectionSample(c, basis)


def covariance_at(basis: SectionBasis, x, y) -> np.ndarray:
    return np.einsum("...ka,...kb->...ab", basis.value(x), basis.value(y))


def covariance_jet_at(basis: SectionBasis, x) -> CovarianceJet:
    s, g, h = basis.value(x), basis.grad(x), basis.hess(x)
    C = np.einsum("...ka,...kb->...ab", s, s)
    D = np.einsum("...kai,...kb->...iab", g, s)
    Q = np.einsum("...kai,...kbj->...ijab", g, g)
    H = np.einsum("...kaij,...kb->...ijab", h, s)
    return CovarianceJet(C, D, Q, H)


def gram_matrix(basis: SectionBasis, resolution=None) -> np.ndarray:
    """L² Gram matrix ``∫ s_kᵀ G s_l dV`` by the manifold quadrature."""
    points, weights = basis.manifold.quadrature(resolution)
    s = basis.value(points)
    if basis.fiber_metric is not None:
        Gs = np.einsum("gab,gkb->gka", basis.fiber_metric(points), s)
    else:
        Gs = s
    w = weights * basis.manifold.volume_density(points)
    return np.einsum("g,gka,gla->kl", w, s, Gs)


def orthonormalize(basis: SectionBasis, resolution=None, rcond: float = 1e-10) -> SectionBasis:
    """Replace the family by ``G^{-1/2} s`` so that its L² Gram matrix is the identity."""
    G = gram_matrix(basis, resolution)
    G = 0.5 * (G + G.T)
    lam, V = np.linalg.eigh(G)
    if lam.min() <= rcond * max(lam.max(), 0.0):
        raise ValueError("sections are numerically linearly dependent")
    inv_root = (V / np.sqrt(lam)) @ V.T
    return basis.mixed(inv_root)


def ampleness_check(basis: SectionBasis, threshold: float = AMPLENESS_THRESHOLD,
                    resolution=None) -> AmplenessReport:
    """Smallest singular value of the ``n×r`` evaluation matrix over the quadrature grid."""
    points, _ = basis.manifold.quadrature(resolution)
    sv = np.linalg.svd(basis.value(points), compute_uv=False)[..., -1]
    k = int(np.argmin(sv))
    smin = float(sv[k])
    return AmplenessReport(smin > threshold or (threshold == 0 and smin >= 0), smin,
                           points[k], threshold)


# ---------------------------------------------------------------------------
# builtin ensembles
# ---------------------------------------------------------------------------


def _sphere_tangent_value(x):
    th, ph = np.asarray(x)[..., 0], np.asarray(x)[..., 1]
    c, s, cp, sp = np.cos(th), np.sin(th), np.cos(ph), np.sin(ph)
    zero = np.zeros_like(th)
    a = np.stack([c * cp, c * sp, -s], axis=-1)
    b = np.stack([-sp / s, cp / s, zero], axis=-1)
    return np.stack([a, b], axis=-1)


def _sphere_tangent_grad(x):
    th, ph = np.asarray(x)[..., 0], np.asarray(x)[..., 1]
    c, s, cp, sp = np.cos(th), np.sin(th), np.cos(ph), np.sin(ph)
    zero = np.zeros_like(th)
    a_t = np.stack([-s * cp, -s * sp, -c], axis=-1)
    a_p = np.stack([-c * sp, c * cp, zero], axis=-1)
    b_t = np.stack([sp * c / s**2, -cp * c / s**2, zero], axis=-1)
    b_p = np.stack([-cp / s, -sp / s, zero], axis=-1)
    a = np.stack([a_t, a_p], axis=-1)
    b = np.stack([b_t, b_p], axis=-1)
    return np.stack([a, b], axis=-2)


def _sphere_tangent_hess(x):
    th, ph = np.asarray(x)[..., 0], np.asarray(x)[..., 1]
    c, s, cp, sp = np.cos(th), np.sin(th), np.cos(ph), np.sin(ph)
    zero = np.zeros_like(th)
    q = (s**2 + 2 * c**2) / s**3
    a_tt = np.stack([-c * cp, -c * sp, s], axis=-1)
    a_tp = np.stack([s * sp, -s * cp, zero], axis=-1)
    a_pp = np.stack([-c * cp, -c * sp, zero], axis=-1)
    b_tt = np.stack([-sp * q, cp * q, zero], axis=-1)
    b_tp = np.stack([cp * c / s**2, sp * c / s**2, zero], axis=-1)
    b_pp = np.stack([sp / s, -cp / s, zero], axis=-1)

    def mat(tt, tp, pp):
        return np.stack([np.stack([tt, tp], axis=-1), np.stack([tp, pp], axis=-1)], axis=-2)

    return np.stack([mat(a_tt, a_tp, a_pp), mat(b_tt, b_tp, b_pp)], axis=-3)


def _round_metric(x):
    th = np.asarray(x)[..., 0]
    out = np.zeros(th.shape + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = np.sin(th) ** 2
    return out


def sphere2_tangent(resolution: int | None = None) -> SectionBasis:
    """Tangential projections ``P_x e_k`` of the three ambient coordinate fields.

    Components are taken in the chart frame ``(∂_θ, ∂_φ)``; the covariance is
    the inverse round metric ``diag(1, 1/sin²θ)``, so the induced metric is the
    round one.
    """
    return SectionBasis(
        "sphere2_tangent", builtin_sphere2(resolution), 2, 3,
        _sphere_tangent_value, _sphere_tangent_grad, _sphere_tangent_hess,
        fiber_metric=_round_metric,
        description="tangential projections of the ambient coordinate fields of R^3")


def _trig_features(x, m):
    """Functions ``1, cos x^1, sin x^1, ..., cos x^m, sin x^m`` with derivatives."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    nf = 2 * m + 1
    f = np.zeros(lead + (nf,))
    df = np.zeros(lead + (nf, m))
    ddf = np.zeros(lead + (nf, m, m))
    f[..., 0] = 1.0
    for i in range(m):
        c, s = np.cos(x[..., i]), np.sin(x[..., i])
        f[..., 2 * i + 1], f[..., 2 * i + 2] = c, s
        df[..., 2 * i + 1, i], df[..., 2 * i + 2, i] = -s, c
        ddf[..., 2 * i + 1, i, i], ddf[..., 2 * i + 2, i, i] = -c, -s
    return f, df, ddf


def trig_basis(name: str, manifold: ManifoldModel, coeffs, description: str = "") -> SectionBasis:
    """Sections ``s_{kα} = Σ_a coeffs[k, α, a] f_a`` over the trigonometric features ``f``."""
    T = np.array(coeffs, dtype=float)
    T.setflags(write=False)
    m = manifold.dim
    if T.shape[2] != 2 * m + 1:
        raise ValueError("coefficient tensor does not match the feature count")

    def value(x):
        return np.einsum("kra,...a->...kr", T, _trig_features(x, m)[0])

    def grad(x):
        return np.einsum("kra,...ai->...kri", T, _trig_features(x, m)[1])

    def hess(x):
        return np.einsum("kra,...aij->...krij", T, _trig_features(x, m)[2])

    return SectionBasis(name, manifold, T.shape[1], T.shape[0], value, grad, hess,
                        description=description,
                        feature_model=(lambda x: _trig_features(x, m), T))


def _standard_trig_coeffs(m: int, r: int) -> np.ndarray:
    nf = 2 * m + 1
    T = np.zeros((r * nf, r, nf))
    for a in range(r):
        for k in range(nf):
            T[a * nf + k, a, k] = 1.0
    return T


def torus_flat(dim: int, resolution: int | None = None) -> SectionBasis:
    """``{1, cos x^i, sin x^i} ⊗ e_α`` with iid coefficients.

    Stationary, covariance ``(1 + dim) I`` and flat correlator connection.
    """
    return trig_basis(f"torus{dim}_flat", builtin_torus(dim, resolution),
                      _standard_trig_coeffs(dim, 2),
                      "stationary trigonometric family; flat connection")


def torus3_trig(resolution: int | None = None) -> SectionBasis:
    """Rank-2 trigonometric family on T³ with a curved correlator connection.

    Each feature ``f_a`` feeds both components with a cross-coupling to the
    next feature, which breaks stationarity and makes the curvature nonzero:
    ``s_{0a} = f_a e_0 + ½ f_{a+1} e_1`` and ``s_{1a} = f_a e_1 - ½ f_{a+3} e_0``
    (feature indices mod 7).
    """
    nf = 7
    T = np.zeros((2 * nf, 2, nf))
    for a in range(nf):
        T[a, 0, a] = 1.0
        T[a, 1, (a + 1) % nf] = 0.5
        T[nf + a, 1, a] = 1.0
        T[nf + a, 0, (a + 3) % nf] = -0.5
    return trig_basis("torus3_trig", builtin_torus(3, resolution), T,
                      "coupled trigonometric family on the 3-torus; curved connection")


ENSEMBLES: dict[str, Callable[..., SectionBasis]] = {
    "sphere2_tangent": sphere2_tangent,
    "torus3_trig": torus3_trig,
    "torus2_flat": lambda resolution=None: torus_flat(2, resolution),
    "torus3_flat": lambda resolution=None: torus_flat(3, resolution),
}


def builtin_ensembles(name: str, resolution: int | None = None) -> SectionBasis:
    try:
        factory = ENSEMBLES[name]
    except KeyError:
        raise KeyError(f"unknown ensemble {name!r}; choose from {sorted(ENSEMBLES)}") from None
    return factory(resolution)


# ---------------------------------------------------------------------------
# deterministic drifts for non-centered ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftSection:
    """A fixed section ``u₀`` (reference components) with its first derivatives."""

    name: str
    amplitude: float
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


def _sinsin(amplitude):
    def value(x):
        x = np.asarray(x, dtype=float)
        return amplitude * np.stack([np.sin(x[..., 0]), np.sin(x[..., 1])], axis=-1)

    def grad(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, x.shape[-1]))
        out[..., 0, 0] = amplitude * np.cos(x[..., 0])
        out[..., 1, 1] = amplitude * np.cos(x[..., 1])
        return out

    return value, grad


def _constant(amplitude):
    def value(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.array([amplitude, 0.0]), x.shape[:-1] + (2,)).copy()

    def grad(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, x.shape[-1]))

    return value, grad


DRIFTS = {"sinsin": _sinsin, "constant": _constant}


def builtin_drift(name: str, amplitude: float) -> DriftSection:
    """``sinsin``: ``a (sin x^1, sin x^2)``; ``constant``: ``(a, 0)``."""
    try:
        value, grad = DRIFTS[name](float(amplitude))
    except KeyError:
        raise KeyError(f"unknown drift {name!r}; choose from {sorted(DRIFTS)}") from None
    return DriftSection(name, float(amplitude), value, grad)
