"""Double-forms, Pfaffians and Gaussian determinant expectations.

A double-form of bidegree ``(p, q)`` over a base of dimension ``m`` is an
element of ``Λ^p V* ⊗ Λ^q V*``.  It is stored sparsely as a mapping from
pairs of strictly increasing index tuples to real coefficients.  Indices are
0-based; multi-indices of a given degree are enumerated in lexicographic order
(``itertools.combinations`` order), and that order is part of the public
contract of every function here that returns per-component arrays.

Pfaffian sign convention
------------------------
``pfaffian_scalar`` carries the ``(-1)^h`` prefactor, so the Pfaffian of the
block ``[[0, a], [-a, 0]]`` is ``-a``.  The Euler form is built from
``pf(-F)``, which makes the end result independent of the convention.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np

MultiIndex = tuple[int, ...]

SKEW_TOL = 1e-9
_ZERO_TOL = 0.0


def multi_indices(m: int, p: int) -> list[MultiIndex]:
    """All strictly increasing index tuples of length ``p`` in ``range(m)``."""
    return list(itertools.combinations(range(m), p))


def check_multi_index(index: Iterable[int], m: int) -> MultiIndex:
    idx = tuple(int(i) for i in index)
    if any(i < 0 or i >= m for i in idx):
        raise ValueError(f"multi-index {idx} out of range for base dimension {m}")
    if any(a >= b for a, b in zip(idx, idx[1:])):
        raise ValueError(f"multi-index {idx} is not strictly increasing")
    return idx


def permutation_sign(seq: Iterable[int]) -> int:
    """Sign of the permutation sorting ``seq``; 0 if it has a repeated entry."""
    s = list(seq)
    if len(set(s)) != len(s):
        return 0
    sign = 1
    for a in range(len(s)):
        for b in range(a + 1, len(s)):
            if s[a] > s[b]:
                sign = -sign
    return sign


def _merge(a: MultiIndex, b: MultiIndex) -> tuple[int, MultiIndex]:
    sign = permutation_sign(a + b)
    if sign == 0:
        return 0, ()
    return sign, tuple(sorted(a + b))


@dataclass(frozen=True)
class DoubleForm:
    """Sparse element of ``Λ^p V* ⊗ Λ^q V*`` with ``dim V = base_dim``."""

    base_dim: int
    bidegree: tuple[int, int]
    coeffs: Mapping[tuple[MultiIndex, MultiIndex], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_dim < 0 or self.base_dim > 8:
            raise ValueError("base dimension must lie in 0..8")
        p, q = self.bidegree
        clean: dict[tuple[MultiIndex, MultiIndex], float] = {}
        for (left, right), value in dict(self.coeffs).items():
            left = check_multi_index(left, self.base_dim)
            right = check_multi_index(right, self.base_dim)
            if len(left) != p or len(right) != q:
                raise ValueError(
                    f"index pair {(left, right)} does not match bidegree {self.bidegree}")
            value = float(value)
            if value != 0.0:
                clean[(left, right)] = clean.get((left, right), 0.0) + value
        object.__setattr__(self, "coeffs", clean)

    # construction helpers ---------------------------------------------------

    @classmethod
    def zero(cls, base_dim: int, bidegree: tuple[int, int]) -> "DoubleForm":
        return cls(base_dim, tuple(bidegree), {})

    @classmethod
    def scalar(cls, base_dim: int, value: float) -> "DoubleForm":
        return cls(base_dim, (0, 0), {((), ()): value})

    @classmethod
    def from_matrix(cls, T) -> "DoubleForm":
        """The (1,1)-double-form ``Σ T[a, i] v^a ⊗ v^i`` of a square matrix."""
        T = np.asarray(T, dtype=float)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError("expected a square matrix")
        n = T.shape[0]
        return cls(n, (1, 1), {((a,), (i,)): T[a, i]
                               for a in range(n) for i in range(n)})

    # arithmetic -------------------------------------------------------------

    def _check_compatible(self, other: "DoubleForm"):
        if not isinstance(other, DoubleForm):
            raise TypeError("expected a DoubleForm")
        if other.base_dim != self.base_dim:
            raise ValueError(
                f"base dimension mismatch: {self.base_dim} vs {other.base_dim}")

    def __add__(self, other: "DoubleForm") -> "DoubleForm":
        self._check_compatible(other)
        if other.bidegree != self.bidegree:
            raise ValueError("cannot add double-forms of different bidegree")
        out = dict(self.coeffs)
        for key, value in other.coeffs.items():
            out[key] = out.get(key, 0.0) + value
        return DoubleForm(self.base_dim, self.bidegree, out)

    def __neg__(self) -> "DoubleForm":
        return self.scale(-1.0)

    def __sub__(self, other: "DoubleForm") -> "DoubleForm":
        return self + (-other)

    def scale(self, c: float) -> "DoubleForm":
        return DoubleForm(self.base_dim, self.bidegree,
                          {k: c * v for k, v in self.coeffs.items()})

    def __mul__(self, c):
        if isinstance(c, DoubleForm):
            return NotImplemented
        return self.scale(float(c))

    __rmul__ = __mul__

    def wedge(self, other: "DoubleForm") -> "DoubleForm":
        return wedge(self, other)

    def __xor__(self, other: "DoubleForm") -> "DoubleForm":
        return wedge(self, other)

    def power(self, k: int) -> "DoubleForm":
        """``k``-fold wedge power; the 0-th power is the unit scalar."""
        if k < 0:
            raise ValueError("negative power")
        out = DoubleForm.scalar(self.base_dim, 1.0)
        for _ in range(k):
            out = wedge(out, self)
        return out

    # inspection -------------------------------------------------------------

    def coefficient(self, left: Iterable[int], right: Iterable[int]) -> float:
        return self.coeffs.get((tuple(left), tuple(right)), 0.0)

    def trace(self) -> float:
        return trace_diag(self)

    def allclose(self, other: "DoubleForm", atol: float = 1e-12) -> bool:
        self._check_compatible(other)
        if other.bidegree != self.bidegree:
            return False
        keys = set(self.coeffs) | set(other.coeffs)
        return all(abs(self.coefficient(*k) - other.coefficient(*k)) <= atol for k in keys)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DoubleForm):
            return NotImplemented
        return (self.base_dim == other.base_dim and self.bidegree == other.bidegree
                and self.coeffs == other.coeffs)

    def __hash__(self):
        return hash((self.base_dim, self.bidegree, tuple(sorted(self.coeffs.items()))))

    def __repr__(self) -> str:
        terms = ", ".join(f"{k}: {v:.6g}" for k, v in sorted(self.coeffs.items()))
        return f"DoubleForm(m={self.base_dim}, bidegree={self.bidegree}, {{{terms}}})"


def wedge(a: DoubleForm, b: DoubleForm) -> DoubleForm:
    """Product ``(ω⊗η) ∧ (ω'⊗η') = (ω∧ω') ⊗ (η∧η')``, extended bilinearly.

    Each slot is shuffled independently; a repeated index annihilates the
    term.
    """
    a._check_compatible(b)
    p, q = a.bidegree
    pp, qq = b.bidegree
    out: dict[tuple[MultiIndex, MultiIndex], float] = {}
    for (al, ar), av in a.coeffs.items():
        for (bl, br), bv in b.coeffs.items():
            s1, left = _merge(al, bl)
            if s1 == 0:
                continue
            s2, right = _merge(ar, br)
            if s2 == 0:
                continue
            key = (left, right)
            out[key] = out.get(key, 0.0) + s1 * s2 * av * bv
    return DoubleForm(a.base_dim, (p + pp, q + qq), out)


def trace_diag(a: DoubleForm) -> float:
    """Trace of a ``(j, j)``-double-form: sum of its diagonal coefficients."""
    p, q = a.bidegree
    if p != q:
        raise ValueError(f"trace needs a square bidegree, got {a.bidegree}")
    return math.fsum(v for (left, right), v in a.coeffs.items() if left == right)


def det_via_power(T) -> float:
    """Determinant as ``tr(ω_T^{∧r}) / r!`` (self-test for the double-form product)."""
    omega = DoubleForm.from_matrix(T)
    r = omega.base_dim
    return trace_diag(omega.power(r)) / math.factorial(r)


# ---------------------------------------------------------------------------
# Pfaffians
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _matchings(r: int) -> tuple[tuple[tuple[tuple[int, int], ...], int], ...]:
    """Perfect matchings of ``range(r)`` with the sign of the flattened permutation."""
    def rec(rest):
        if not rest:
            yield ()
            return
        first = rest[0]
        for k in range(1, len(rest)):
            pair = (first, rest[k])
            for tail in rec(rest[1:k] + rest[k + 1:]):
                yield (pair,) + tail

    out = []
    for match in rec(tuple(range(r))):
        flat = [i for pair in match for i in pair]
        out.append((match, permutation_sign(flat)))
    return tuple(out)


@lru_cache(maxsize=None)
def _ordered_pairings(r: int) -> tuple[tuple[tuple[int, ...], int], ...]:
    """Permutations with ``σ1<σ2, σ3<σ4, ...`` together with their signs."""
    out = []
    for perm in itertools.permutations(range(r)):
        if all(perm[2 * k] < perm[2 * k + 1] for k in range(r // 2)):
            out.append((perm, permutation_sign(perm)))
    return tuple(out)


def _check_even(r: int):
    if r % 2:
        raise ValueError(f"Pfaffian needs even rank, got {r}")


def _symmetrize_skew(F: np.ndarray, tol: float = SKEW_TOL) -> np.ndarray:
    asym = np.max(np.abs(F + np.swapaxes(F, -1, -2)), initial=0.0)
    if asym > tol:
        raise ValueError(f"matrix is not skew-symmetric (defect {asym:.3g})")
    return 0.5 * (F - np.swapaxes(F, -1, -2))


def pfaffian_scalar(F) -> np.ndarray | float:
    """Pfaffian of a skew-symmetric matrix, including the ``(-1)^h`` prefactor.

    Accepts a stack ``(..., r, r)``.  Grouping the ``r!`` permutations of the
    defining sum by the perfect matching they induce leaves ``(r-1)!!`` signed
    products, each counted ``2^h h!`` times.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim < 2 or F.shape[-1] != F.shape[-2]:
        raise ValueError("expected square matrices")
    r = F.shape[-1]
    _check_even(r)
    F = _symmetrize_skew(F)
    h = r // 2
    total = np.zeros(F.shape[:-2])
    for match, sign in _matchings(r):
        term = np.ones(F.shape[:-2])
        for a, b in match:
            term = term * F[..., a, b]
        total = total + sign * term
    total = (-1) ** h * total
    return float(total) if total.ndim == 0 else total


class SkewFormMatrix:
    """Skew ``r×r`` matrix of 2-forms on an ``m``-dimensional base.

    Stored as the array ``coeffs[α, β, i, j]`` (coefficient of ``dx^i∧dx^j``
    for ``i<j``, extended antisymmetrically in both index pairs).
    """

    def __init__(self, coeffs, tol: float = SKEW_TOL):
        c = np.asarray(coeffs, dtype=float)
        if c.ndim != 4 or c.shape[0] != c.shape[1] or c.shape[2] != c.shape[3]:
            raise ValueError("expected an array of shape (r, r, m, m)")
        defect = max(np.max(np.abs(c + c.transpose(1, 0, 2, 3)), initial=0.0),
                     np.max(np.abs(c + c.transpose(0, 1, 3, 2)), initial=0.0))
        if defect > tol:
            raise ValueError(f"form matrix is not skew (defect {defect:.3g})")
        c = 0.5 * (c - c.transpose(1, 0, 2, 3))
        c = 0.5 * (c - c.transpose(0, 1, 3, 2))
        self.coeffs = c
        self.coeffs.setflags(write=False)

    @property
    def rank(self) -> int:
        return self.coeffs.shape[0]

    @property
    def base_dim(self) -> int:
        return self.coeffs.shape[2]

    def entry(self, alpha: int, beta: int) -> DoubleForm:
        m = self.base_dim
        return DoubleForm(m, (2, 0), {((i, j), ()): self.coeffs[alpha, beta, i, j]
                                      for i, j in multi_indices(m, 2)})

    def restrict(self, index: MultiIndex) -> "SkewFormMatrix":
        """Restriction of every entry to the coordinate subspace ``V_I``."""
        idx = list(index)
        return SkewFormMatrix(self.coeffs[:, :, idx][:, :, :, idx])

    def __neg__(self) -> "SkewFormMatrix":
        return SkewFormMatrix(-self.coeffs)


def _as_form_matrix(F) -> SkewFormMatrix:
    return F if isinstance(F, SkewFormMatrix) else SkewFormMatrix(F)


def pfaffian_components(F) -> np.ndarray:
    """Components ``ppf(F)_I`` for every ``|I| = r``, via the restricted expansion.

    ``F`` is a (stack of) form matrices ``(..., r, r, m, m)``.  Returns
    ``(..., C(m, r))`` in lexicographic order of ``I``.  Each component is
    ``(-1)^h/h! Σ_{σ,φ} ε(σ)ε(φ) Π_k F[σ_{2k-1} σ_{2k} | I_{φ_{2k-1}} I_{φ_{2k}}]``
    over the ordered pairings ``σ, φ`` of ``range(r)``.
    """
    F = np.asarray(F, dtype=float)
    r, m = F.shape[-4], F.shape[-1]
    _check_even(r)
    if m < r:
        raise ValueError("need base dimension >= rank")
    h = r // 2
    pairings = _ordered_pairings(r)
    comps = []
    for index in multi_indices(m, r):
        total = np.zeros(F.shape[:-4])
        for sigma, s_sign in pairings:
            for phi, p_sign in pairings:
                term = np.ones(F.shape[:-4])
                for k in range(h):
                    a, b = sigma[2 * k], sigma[2 * k + 1]
                    i, j = index[phi[2 * k]], index[phi[2 * k + 1]]
                    term = term * F[..., a, b, i, j]
                total = total + s_sign * p_sign * term
        comps.append((-1) ** h * total / math.factorial(h))
    return np.stack(comps, axis=-1)


def pfaffian_form(F) -> DoubleForm:
    """Pfaffian of a skew matrix of 2-forms, as a ``(r, 0)``-double-form."""
    F = _as_form_matrix(F)
    r, m = F.rank, F.base_dim
    _check_even(r)
    comps = pfaffian_components(F.coeffs)
    return DoubleForm(m, (r, 0), {(index, ()): c
                                  for index, c in zip(multi_indices(m, r), comps)})


def berezin_form(F) -> DoubleForm:
    """``Ω_F = -Σ_{α<β} F_{αβ} ⊗ v^α∧v^β``: base indices left, bundle indices right.

    Both slots live over ``max(m, r)`` coordinates so that the product of
    mixed double-forms reuses :func:`wedge`.
    """
    F = _as_form_matrix(F)
    r, m = F.rank, F.base_dim
    n = max(r, m)
    coeffs = {}
    for a, b in multi_indices(r, 2):
        for i, j in multi_indices(m, 2):
            coeffs[((i, j), (a, b))] = -F.coeffs[a, b, i, j]
    return DoubleForm(n, (2, 2), coeffs)


def pfaffian_form_berezin(F) -> DoubleForm:
    """Pfaffian through ``Ω_F^{∧h}/h!`` contracted against the bundle volume element.

    When ``m = r`` the contraction is the trace of the ``(r, r)``-double-form.
    """
    F = _as_form_matrix(F)
    r, m = F.rank, F.base_dim
    _check_even(r)
    h = r // 2
    power = berezin_form(F).power(h)
    top = tuple(range(r))
    coeffs = {}
    for (left, right), v in power.coeffs.items():
        if right == top:
            coeffs[(left, ())] = v / math.factorial(h)
    return DoubleForm(m, (r, 0), coeffs)


# ---------------------------------------------------------------------------
# Gaussian matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMatrixLaw:
    """Law of a Gaussian ``r×r`` matrix ``S`` with mean ``μ``.

    ``covariance[a, i, b, j] = Cov(S[a, i], S[b, j])``.
    """

    mean: np.ndarray
    covariance: np.ndarray
    psd_tol: float = 1e-10

    def __post_init__(self):
        mu = np.array(self.mean, dtype=float)
        K = np.array(self.covariance, dtype=float)
        r = mu.shape[0]
        if mu.shape != (r, r) or K.shape != (r, r, r, r):
            raise ValueError("mean must be (r, r) and covariance (r, r, r, r)")
        if np.max(np.abs(K - K.transpose(2, 3, 0, 1)), initial=0.0) > 1e-10 * max(1.0, np.abs(K).max()):
            raise ValueError("covariance is not symmetric under (a,i) <-> (b,j)")
        K = 0.5 * (K + K.transpose(2, 3, 0, 1))
        lam = np.linalg.eigvalsh(K.reshape(r * r, r * r))
        if lam.min() < -self.psd_tol * max(1.0, abs(lam).max()):
            raise ValueError("covariance is not positive semidefinite")
        mu.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", K)

    @property
    def rank(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def centered(cls, covariance) -> "GaussianMatrixLaw":
        K = np.asarray(covariance, dtype=float)
        return cls(np.zeros(K.shape[:2]), K)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` matrices, shape ``(n, r, r)``."""
        r = self.rank
        cov = self.covariance.reshape(r * r, r * r)
        lam, vec = np.linalg.eigh(cov)
        root = vec * np.sqrt(np.clip(lam, 0.0, None))
        z = rng.standard_normal((n, r * r))
        return self.mean + (z @ root.T).reshape(n, r, r)


def xi_array(K) -> np.ndarray:
    """``Ξ[a, b, i, j] = K[a, i, b, j] - K[a, j, b, i]`` for a covariance array."""
    K = np.asarray(K, dtype=float)
    return K.transpose(0, 2, 1, 3) - K.transpose(0, 2, 3, 1)


def xi_from_covariance(law: GaussianMatrixLaw) -> DoubleForm:
    """The (2,2)-double-form ``Σ_{α<β, i<j} Ξ_{αβ|ij} v^α∧v^β ⊗ v^i∧v^j``."""
    xi = xi_array(law.covariance)
    r = law.rank
    pairs = multi_indices(r, 2)
    return DoubleForm(r, (2, 2), {((a, b), (i, j)): xi[a, b, i, j]
                                  for a, b in pairs for i, j in pairs})


def expected_det(law: GaussianMatrixLaw) -> float:
    """``E[det S] = tr(Ξ^{∧h}) / h!`` for a centered law of even rank."""
    r = law.rank
    _check_even(r)
    if np.any(law.mean != 0.0):
        raise ValueError("expected_det needs a centered law; use expected_det_shifted")
    h = r // 2
    return trace_diag(xi_from_covariance(law).power(h)) / math.factorial(h)


def expected_det_shifted(law: GaussianMatrixLaw) -> float:
    """``E[det(μ+S)] = Σ_j tr(μ^{∧(2h-2j)} ∧ Ξ^{∧j}) / ((2h-2j)! j!)``."""
    r = law.rank
    _check_even(r)
    h = r // 2
    mu = DoubleForm.from_matrix(law.mean)
    xi = xi_from_covariance(law)
    total = []
    for j in range(h + 1):
        term = wedge(mu.power(2 * h - 2 * j), xi.power(j))
        total.append(trace_diag(term) / (math.factorial(2 * h - 2 * j) * math.factorial(j)))
    return math.fsum(total)


def expected_det_shifted_rank2(mean, covariance) -> np.ndarray:
    """Vectorized rank-2 case: ``det μ + Ξ_{01|01}`` over leading batch axes."""
    mu = np.asarray(mean, dtype=float)
    K = np.asarray(covariance, dtype=float)
    det_mu = mu[..., 0, 0] * mu[..., 1, 1] - mu[..., 0, 1] * mu[..., 1, 0]
    xi = K[..., 0, 0, 1, 1] - K[..., 0, 1, 1, 0]
    return det_mu + xi
