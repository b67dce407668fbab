"""Metric, connection, curvature and Euler form induced by an ensemble's correlator.

Conventions
-----------
A frame is described by a transform ``A(x)``: the frame is ``e = ẽ A`` where
``ẽ`` is the ensemble's reference frame, so frame components are
``u = P ũ`` with ``P = A⁻¹``.  The correlator metric is the one making the
frame components of ``u(x)`` standard normal, i.e. ``A Aᵀ = C(x, x)``.

Connection coefficients are ``Γ_i[α, β] = -E[∂_i u_α · u_β]`` and the curvature
is ``F_ij = ∂_i Γ_j - ∂_j Γ_i + [Γ_i, Γ_j]``, stored as ``F[α, β, i, j]``.
All point functions accept a batch of points ``(..., m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .algebra import DoubleForm, pfaffian_components, pfaffian_form
from .ensemble import SectionBasis, covariance_at, covariance_jet_at

SKEW_TOL = 1e-9

# A rotation field returns (g, dg, ddg) with shapes (..., r, r), (..., m, r, r),
# (..., m, m, r, r) for a batch of points.
RotationField = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


def _sym_sqrt_jet(C, dC, ddC):
    """Symmetric square root of SPD ``C`` and its first two derivatives.

    Derivatives come from differentiating ``A A = C``: ``A X + X A = ∂C`` is a
    Sylvester equation, diagonal in the eigenbasis of ``C``.
    """
    lam, V = np.linalg.eigh(C)
    if np.any(lam <= 0):
        raise ValueError("covariance is not positive definite")
    root = np.sqrt(lam)
    A = np.einsum("...ak,...k,...bk->...ab", V, root, V)
    denom = root[..., :, None] + root[..., None, :]

    def solve(B, k):
        # B carries k derivative axes between the batch axes and the matrix axes
        Vb = V.reshape(V.shape[:-2] + (1,) * k + V.shape[-2:])
        db = denom.reshape(denom.shape[:-2] + (1,) * k + denom.shape[-2:])
        Bt = np.swapaxes(Vb, -1, -2) @ B @ Vb
        return Vb @ (Bt / db) @ np.swapaxes(Vb, -1, -2)

    dA = solve(dC, 1)
    rhs = ddC - np.einsum("...jab,...ibc->...ijac", dA, dA) - np.einsum("...iab,...jbc->...ijac", dA, dA)
    ddA = solve(rhs, 2)
    return A, dA, 0.5 * (ddA + np.swapaxes(ddA, -3, -4))


@dataclass(frozen=True)
class FrameJet:
    """Frame transform data at a batch of points.

    ``dA[..., i, :, :] = ∂_i A`` and ``ddA[..., i, j, :, :] = ∂²_{ij} A``.
    """

    A: np.ndarray
    dA: np.ndarray
    ddA: np.ndarray

    @property
    def P(self):
        return np.linalg.inv(self.A)

    def inverse_jet(self):
        """``P``, ``∂P = -P ∂A P`` and ``∂²P``."""
        P = self.P
        dP = -np.einsum("...ab,...ibc,...cd->...iad", P, self.dA, P)
        ddP = (-np.einsum("...jab,...ibc,...cd->...ijad", dP, self.dA, P)
               - np.einsum("...ab,...ijbc,...cd->...ijad", P, self.ddA, P)
               - np.einsum("...ab,...ibc,...jcd->...ijad", P, self.dA, dP))
        return P, dP, ddP


@dataclass(frozen=True)
class OrthoFrameField:
    """Orthonormal frame for the correlator metric.

    The default frame is ``A = C(x, x)^{1/2}``.  ``rotation`` post-multiplies it
    by a field of rotations ``g(x)``: ``A' = A g``.
    """

    basis: SectionBasis
    rotation: RotationField | None = None

    @property
    def rank(self) -> int:
        return self.basis.rank

    @property
    def dim(self) -> int:
        return self.basis.dim

    def jet(self, x) -> tuple[FrameJet, "object"]:
        """Frame jet and the covariance jet at ``x``."""
        cj = covariance_jet_at(self.basis, x)
        dC = cj.D + np.swapaxes(cj.D, -1, -2)
        ddC = (cj.H + np.swapaxes(cj.H, -1, -2) + cj.Q + np.swapaxes(cj.Q, -1, -2))
        A, dA, ddA = _sym_sqrt_jet(cj.C, dC, ddC)
        if self.rotation is not None:
            g, dg, ddg = self.rotation(np.asarray(x, dtype=float))
            A, dA, ddA = (
                A @ g,
                np.einsum("...iab,...bc->...iac", dA, g) + np.einsum("...ab,...ibc->...iac", A, dg),
                np.einsum("...ijab,...bc->...ijac", ddA, g)
                + np.einsum("...iab,...jbc->...ijac", dA, dg)
                + np.einsum("...jab,...ibc->...ijac", dA, dg)
                + np.einsum("...ab,...ijbc->...ijac", A, ddg),
            )
        return FrameJet(A, dA, ddA), cj

    def frame_transform(self, x) -> np.ndarray:
        return self.jet(x)[0].A

    def components(self, x, reference) -> np.ndarray:
        """Frame components ``P ũ`` of reference components ``ũ``."""
        return np.einsum("...ab,...b->...a", self.jet(x)[0].P, reference)

    def rotated(self, rotation: RotationField) -> "OrthoFrameField":
        if self.rotation is None:
            return OrthoFrameField(self.basis, rotation)
        inner = self.rotation

        def composed(x):
            g1, dg1, ddg1 = inner(x)
            g2, dg2, ddg2 = rotation(x)
            g = g1 @ g2
            dg = np.einsum("...iab,...bc->...iac", dg1, g2) + np.einsum("...ab,...ibc->...iac", g1, dg2)
            ddg = (np.einsum("...ijab,...bc->...ijac", ddg1, g2)
                   + np.einsum("...iab,...jbc->...ijac", dg1, dg2)
                   + np.einsum("...jab,...ibc->...ijac", dg1, dg2)
                   + np.einsum("...ab,...ijbc->...ijac", g1, ddg2))
            return g, dg, ddg

        return OrthoFrameField(self.basis, composed)


def ortho_frame(basis: SectionBasis) -> OrthoFrameField:
    return OrthoFrameField(basis)


def rotation_field(generator, angle, angle_grad, angle_hess) -> RotationField:
    """Rotation field ``g(x) = exp(ψ(x) X)`` for a fixed skew generator ``X``.

    ``angle``, ``angle_grad`` and ``angle_hess`` give ``ψ``, ``∂_i ψ`` and
    ``∂²_{ij} ψ`` on a batch of points.
    """
    X = np.asarray(generator, dtype=float)
    if np.max(np.abs(X + X.T)) > SKEW_TOL:
        raise ValueError("rotation generator must be skew-symmetric")
    lam, V = np.linalg.eig(X)

    def field_(x):
        psi, dpsi, ddpsi = angle(x), angle_grad(x), angle_hess(x)
        phase = np.exp(np.asarray(psi)[..., None] * lam)
        g = np.real(np.einsum("ak,...k,kb->...ab", V, phase, np.linalg.inv(V)))
        Xg = X @ g
        XXg = X @ Xg
        dg = dpsi[..., :, None, None] * Xg[..., None, :, :]
        ddg = (ddpsi[..., :, :, None, None] * Xg[..., None, None, :, :]
               + (dpsi[..., :, None] * dpsi[..., None, :])[..., None, None] * XXg[..., None, None, :, :])
        return g, dg, ddg

    return field_


def planar_rotation_field(angle, angle_grad, angle_hess) -> RotationField:
    """Rank-2 rotation field by the angle ``ψ(x)``."""
    return rotation_field([[0.0, -1.0], [1.0, 0.0]], angle, angle_grad, angle_hess)


# ---------------------------------------------------------------------------
# connection and curvature
# ---------------------------------------------------------------------------


def _first_moments(fj: FrameJet, cj):
    """``M_i = E[∂_i u uᵀ]`` and ``W_ij = E[∂_i u ∂_j uᵀ]`` in frame components."""
    P, dP, _ = fj.inverse_jet()
    C, D, Q = cj.C, cj.D, cj.Q
    Pt = np.swapaxes(P, -1, -2)
    dPt = np.swapaxes(dP, -1, -2)
    M = (np.einsum("...ab,...ibc,...cd->...iad", P, D, Pt)
         + np.einsum("...iab,...bc,...cd->...iad", dP, C, Pt))
    W = (np.einsum("...ab,...ijbc,...cd->...ijad", P, Q, Pt)
         + np.einsum("...ab,...ibc,...jcd->...ijad", P, D, dPt)
         + np.einsum("...iab,...jcb,...cd->...ijad", dP, D, Pt)
         + np.einsum("...iab,...bc,...jcd->...ijad", dP, C, dPt))
    return M, W


def connection_coeffs(frame: OrthoFrameField, x) -> np.ndarray:
    """``Γ_i = -E[∂_i u uᵀ]`` as an array ``(..., m, r, r)``."""
    fj, cj = frame.jet(x)
    M, _ = _first_moments(fj, cj)
    gamma = -M
    defect = np.max(np.abs(gamma + np.swapaxes(gamma, -1, -2)), initial=0.0)
    if defect > SKEW_TOL:
        raise ArithmeticError(f"connection coefficients are not skew (defect {defect:.3g})")
    return 0.5 * (gamma - np.swapaxes(gamma, -1, -2))


def _gamma_and_derivative(frame: OrthoFrameField, x):
    fj, cj = frame.jet(x)
    P, dP, ddP = fj.inverse_jet()
    M, W = _first_moments(fj, cj)
    Pt = np.swapaxes(P, -1, -2)
    # ∂_j M_i = E[∂²_{ij}u uᵀ] + W_ij
    dM = (np.einsum("...ijab,...bc,...cd->...jiad", ddP, cj.C, Pt)
          + np.einsum("...iab,...jbc,...cd->...jiad", dP, cj.D, Pt)
          + np.einsum("...jab,...ibc,...cd->...jiad", dP, cj.D, Pt)
          + np.einsum("...ab,...ijbc,...cd->...jiad", P, cj.H, Pt)
          + np.swapaxes(W, -3, -4))
    # dM[..., j, i] = ∂_j M_i
    return -M, -dM


def _to_form_layout(Fij):
    """``(..., i, j, α, β)`` to ``(..., α, β, i, j)``, projected onto the skew part in ``α, β``."""
    F = np.moveaxis(Fij, (-4, -3), (-2, -1))
    return 0.5 * (F - np.swapaxes(F, -3, -4))


def curvature_gauge(frame: OrthoFrameField, x) -> np.ndarray:
    """``F_ij = ∂_iΓ_j - ∂_jΓ_i + [Γ_i, Γ_j]`` from second-order covariance jets."""
    gamma, dgamma = _gamma_and_derivative(frame, x)
    # dgamma[..., i, j] = ∂_i Γ_j
    curl = dgamma - np.swapaxes(dgamma, -3, -4)
    comm = (np.einsum("...iab,...jbc->...ijac", gamma, gamma)
            - np.einsum("...jab,...ibc->...ijac", gamma, gamma))
    return _to_form_layout(curl + comm)


def synchronous_transform(frame: OrthoFrameField, x):
    """First-order jet at ``x`` of the frame ``A g``, with the covariance jet.

    The frame is ``A g`` with ``g(y) = exp(-Σ Γ_i(x)(y-x)^i)``.

    Only ``g(x) = I`` and ``∂_i g(x) = -Γ_i(x)`` enter, so the jet is exact.
    """
    fj, cj = frame.jet(x)
    M, _ = _first_moments(fj, cj)
    gamma = -M
    dA = fj.dA - np.einsum("...ab,...ibc->...iac", fj.A, gamma)
    return FrameJet(fj.A, dA, np.full_like(fj.ddA, np.nan)), cj


def synchronous_rotation(frame: OrthoFrameField, x0) -> Callable[[np.ndarray], np.ndarray]:
    """The gauge rotation ``g(y) = exp(-Σ Γ_i(x₀)(y - x₀)^i)`` as a function of ``y``."""
    gamma = connection_coeffs(frame, np.asarray(x0, dtype=float))

    def g(y):
        gen = -np.einsum("i,iab->ab", np.asarray(y, dtype=float) - x0, gamma)
        return expm(gen)

    return g


def curvature_stochastic(frame: OrthoFrameField, x) -> np.ndarray:
    """``F_{αβ|ij} = E[∂_i u_α ∂_j u_β] - E[∂_j u_α ∂_i u_β]`` in a synchronous frame at ``x``."""
    fj, cj = synchronous_transform(frame, x)
    M, W = _first_moments(fj, cj)
    residual = np.max(np.abs(M), initial=0.0)
    if residual > 1e-8 * max(1.0, np.max(np.abs(W), initial=0.0)):
        raise ArithmeticError(f"synchronous gauge failed (residual Γ {residual:.3g})")
    return _to_form_layout(W - np.swapaxes(W, -3, -4))


def tunneling(frame: OrthoFrameField, x, y) -> np.ndarray:
    """``T(x, y) = E[u(x) u(y)ᵀ]`` in frame components at ``x`` and ``y``."""
    Px = frame.jet(x)[0].P
    Py = frame.jet(y)[0].P
    return Px @ covariance_at(frame.basis, x, y) @ np.swapaxes(Py, -1, -2)


# ---------------------------------------------------------------------------
# Euler form
# ---------------------------------------------------------------------------


def _check_even(r):
    if r % 2:
        raise ValueError("the Euler form needs even rank")


def euler_form(frame: OrthoFrameField, x) -> DoubleForm:
    """``pf(-F(x)) / (2π)^h`` at one point, as a degree-``r`` form."""
    r = frame.rank
    _check_even(r)
    F = curvature_gauge(frame, np.asarray(x, dtype=float))
    return pfaffian_form(-F).scale((2 * math.pi) ** (-(r // 2)))


def euler_components(frame: OrthoFrameField, x, curvature=curvature_gauge) -> np.ndarray:
    """Components of the Euler form on every ``dx^I``, ``|I| = r``, in lexicographic order.

    Vectorized over points; for ``r = m`` there is a single component, the
    density against ``dx^1 ∧ ... ∧ dx^m``.
    """
    r = frame.rank
    _check_even(r)
    F = curvature(frame, x)
    return pfaffian_components(-F) * (2 * math.pi) ** (-(r // 2))


@dataclass(frozen=True)
class ConnectionField:
    """Pointwise access to ``Γ``, ``F`` and the Euler form of a frame."""

    frame: OrthoFrameField

    def gamma(self, x):
        return connection_coeffs(self.frame, x)

    def curvature(self, x):
        return curvature_gauge(self.frame, x)

    def euler_density(self, x):
        comps = euler_components(self.frame, x)
        if self.frame.rank == self.frame.dim:
            return comps[..., 0]
        return comps

    def euler_form(self, x) -> DoubleForm:
        return euler_form(self.frame, x)


# ---------------------------------------------------------------------------
# independence of u and its covariant derivative
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndependenceReport:
    nsamples: int
    empirical: np.ndarray
    bound: float
    max_abs: float
    passed: bool
    analytic: np.ndarray
    raw_analytic: np.ndarray


def frame_jets_of_sample(frame: OrthoFrameField, x, values, jacobians):
    """Frame components ``u`` and ``∂_i u`` from reference values and jacobians.

    ``values`` is ``(N, r)`` and ``jacobians`` ``(N, r, m)`` at the single point ``x``.
    """
    fj, _ = frame.jet(x)
    P, dP, _ = fj.inverse_jet()
    u = values @ P.T
    du = np.einsum("iab,nb->nai", dP, values) + np.einsum("ab,nbi->nai", P, jacobians)
    return u, du


def independence_check(basis: SectionBasis, x, nsamples: int, rng: np.random.Generator,
                       frame: OrthoFrameField | None = None) -> IndependenceReport:
    """Empirical cross-covariance of ``u(x)`` and ``∇u(x) = du - M u`` in frame components."""
    frame = frame or ortho_frame(basis)
    x = np.asarray(x, dtype=float)
    fj, cj = frame.jet(x)
    M, _ = _first_moments(fj, cj)
    coeffs = rng.standard_normal((nsamples, basis.size))
    values = coeffs @ basis.value(x)
    jac = np.einsum("nk,kai->nai", coeffs, basis.grad(x))
    u, du = frame_jets_of_sample(frame, x, values, jac)
    nabla = du - np.einsum("iab,nb->nai", M, u)
    empirical = np.einsum("nc,nai->cai", u, nabla) / nsamples
    analytic = np.zeros_like(empirical)
    raw = np.einsum("iab->bai", M)  # E[u_c ∂_i u_a] = M_i[a, c]
    bound = 4.0 / math.sqrt(nsamples)
    max_abs = float(np.max(np.abs(empirical)))
    return IndependenceReport(nsamples, empirical, bound, max_abs, max_abs <= bound,
                              analytic, raw)
