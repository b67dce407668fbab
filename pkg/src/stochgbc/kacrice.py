"""Closed-form Kac-Rice densities for zero loci of Gaussian sections.

For a section ``v = u₀ + u`` (``u₀`` deterministic, possibly zero) the expected
zero-locus current has, on ``dx^I`` (``|I| = r``), the coefficient

    ``p_{u(x)}(-u₀(x)) · E[Δ_I(dv(x)) | v(x) = 0]``

where ``Δ_I`` is the ``r×r`` minor on columns ``I`` and everything is written
in orthonormal frame components, so ``p_{u(x)}`` is the standard Gaussian
density on ``R^r``.  The conditional law of ``dv`` is Gaussian and the
expectation of its minor is evaluated with the double-form identities in
:mod:`stochgbc.algebra`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .algebra import (
    GaussianMatrixLaw,
    expected_det,
    expected_det_shifted,
    expected_det_shifted_rank2,
    multi_indices,
    permutation_sign,
)
from .ensemble import DriftSection, SectionBasis
from .geometry import OrthoFrameField, _first_moments

RANK_TOL = 1e-8


@dataclass(frozen=True)
class ConditionalJetLaw:
    """Law of the frame-component derivative ``dv(x)`` given ``v(x) = 0``.

    ``mean[..., α, i]`` and ``covariance[..., α, i, β, j]``; ``gaussian_density``
    is ``p_{u(x)}(-u₀(x))``.
    """

    mean: np.ndarray
    covariance: np.ndarray
    gaussian_density: np.ndarray
    drift_value: np.ndarray

    def restricted(self, index) -> GaussianMatrixLaw:
        """Law of the ``r×r`` block on columns ``index`` (single point only)."""
        idx = list(index)
        K = self.covariance[:, idx][:, :, :, idx]
        return GaussianMatrixLaw(self.mean[:, idx], K)


def conditional_law(basis: SectionBasis, frame: OrthoFrameField, x,
                    drift: DriftSection | None = None) -> ConditionalJetLaw:
    """Regression split of ``(dv(x), v(x))`` in the orthonormal frame.

    ``E[∂_i u | u] = M_i u`` with ``M_i = E[∂_i u uᵀ]``; hence given
    ``u = -u₀`` the derivative of ``v`` has mean ``∂_i u₀ - M_i u₀`` (the
    covariant derivative of the drift) and covariance ``W_ij - M_i M_jᵀ``.
    """
    x = np.asarray(x, dtype=float)
    fj, cj = frame.jet(x)
    M, W = _first_moments(fj, cj)
    K = W - np.einsum("...iac,...jbc->...ijab", M, M)
    K = np.einsum("...ijab->...aibj", K)
    K = 0.5 * (K + np.einsum("...aibj->...bjai", K))
    r, m = basis.rank, basis.dim
    if drift is None:
        u0 = np.zeros(x.shape[:-1] + (r,))
        mean = np.zeros(x.shape[:-1] + (r, m))
    else:
        P, dP, _ = fj.inverse_jet()
        ref, dref = drift.value(x), drift.grad(x)
        u0 = np.einsum("...ab,...b->...a", P, ref)
        du0 = (np.einsum("...iab,...b->...ai", dP, ref)
               + np.einsum("...ab,...bi->...ai", P, dref))
        mean = du0 - np.einsum("...iab,...b->...ai", M, u0)
    h = r / 2
    density = (2 * math.pi) ** (-h) * np.exp(-0.5 * np.sum(u0**2, axis=-1))
    return ConditionalJetLaw(mean, K, density, u0)


def _expected_minors(law: ConditionalJetLaw, r: int, m: int) -> np.ndarray:
    """``E[Δ_I(dv)]`` for every ``|I| = r``, shape ``(..., C(m, r))``."""
    out = []
    for index in multi_indices(m, r):
        idx = list(index)
        mean = law.mean[..., idx]
        K = law.covariance[..., idx, :, :][..., idx]
        if r == 2:
            out.append(expected_det_shifted_rank2(mean, K))
            continue
        flat_mean = mean.reshape((-1, r, r))
        flat_K = K.reshape((-1, r, r, r, r))
        vals = [expected_det_shifted(GaussianMatrixLaw(mu, k)) for mu, k in zip(flat_mean, flat_K)]
        out.append(np.array(vals).reshape(mean.shape[:-2]))
    return np.stack(out, axis=-1)


def kacrice_density(basis: SectionBasis, frame: OrthoFrameField, x, index_set=None,
                    drift: DriftSection | None = None):
    """``ρ(x) = E[Δ_{I₀}(dv(x)) | v(x) = 0]``; ``I₀`` defaults to the first ``r`` coordinates."""
    r = basis.rank
    index_set = tuple(range(r)) if index_set is None else tuple(index_set)
    if len(index_set) != r:
        raise ValueError("index set must have exactly r entries")
    law = conditional_law(basis, frame, x, drift)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and r != 2:
        sub = law.restricted(index_set)
        return expected_det(sub) if drift is None else expected_det_shifted(sub)
    idx = list(index_set)
    mean = law.mean[..., idx]
    K = law.covariance[..., idx, :, :][..., idx]
    if r == 2:
        out = expected_det_shifted_rank2(mean, K)
        return float(out) if np.ndim(out) == 0 else out
    flat = [expected_det_shifted(GaussianMatrixLaw(mu, k))
            for mu, k in zip(mean.reshape((-1, r, r)), K.reshape((-1, r, r, r, r)))]
    return np.array(flat).reshape(mean.shape[:-2])


def current_components(basis: SectionBasis, frame: OrthoFrameField, x,
                       drift: DriftSection | None = None) -> np.ndarray:
    """Coefficients of the expected zero-locus current on every ``dx^I``, ``|I| = r``."""
    law = conditional_law(basis, frame, x, drift)
    minors = _expected_minors(law, basis.rank, basis.dim)
    return law.gaussian_density[..., None] * minors


def complement_signs(m: int, p: int) -> list[tuple[tuple[int, ...], tuple[int, ...], int]]:
    """``(J, Jᶜ, ε)`` with ``dx^J ∧ dx^{Jᶜ} = ε dx^1 ∧ ... ∧ dx^m``, ``J`` in lexicographic order."""
    out = []
    for J in multi_indices(m, p):
        Jc = tuple(i for i in range(m) if i not in J)
        out.append((J, Jc, permutation_sign(J + Jc)))
    return out


def expected_current_density(basis: SectionBasis, frame: OrthoFrameField, x, test_form,
                             drift: DriftSection | None = None) -> np.ndarray:
    """Coefficient of ``η ∧ E[Z]`` on ``dx^1 ∧ ... ∧ dx^m``.

    Integrating it over the chart gives ``E⟨η, [Z_v]⟩``.  ``test_form`` must
    have degree ``m - r``.
    """
    m, r = basis.dim, basis.rank
    p = m - r
    if test_form.degree != p:
        raise ValueError(f"test form has degree {test_form.degree}, expected {p}")
    comps = current_components(basis, frame, x, drift)
    eta = test_form(x)
    order = {I: k for k, I in enumerate(multi_indices(m, r))}
    total = np.zeros(comps.shape[:-1])
    for k, (J, Jc, sign) in enumerate(complement_signs(m, p)):
        total = total + sign * eta[..., k] * comps[..., order[Jc]]
    return total


def jacobian_and_G(T, index_set=None) -> tuple[float, float]:
    """``Jac_T = sqrt(det T Tᵀ)`` and ``G(T) = Δ_{I₀}(T) / Jac_T`` (0 if ``T`` is not onto)."""
    T = np.asarray(T, dtype=float)
    r, m = T.shape
    index_set = tuple(range(r)) if index_set is None else tuple(index_set)
    sv = np.linalg.svd(T, compute_uv=False)
    jac = float(np.prod(sv))
    if sv[-1] < RANK_TOL:
        return jac, 0.0
    minor = float(np.linalg.det(T[:, list(index_set)]))
    return jac, float(np.clip(minor / jac, -1.0, 1.0))
