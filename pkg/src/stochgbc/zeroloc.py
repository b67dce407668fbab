"""Oriented zero loci of sampled sections and their integration currents.

Two cases are supported:

* ``m = r``: the zero set is a finite set of points, each carrying the sign of
  ``det du`` (frame components, chart coordinates).
* ``m = r + 1``: the zero set is a union of closed curves, traced by
  predictor-corrector continuation and stored as polylines.

Orientation of curves
---------------------
With ``a_1, ..., a_r`` the rows of ``du`` (chart gradients of the frame
components), the tangent ``t`` is chosen with ``det[a_1; ...; a_r; t] > 0``.
Concretely ``t_k = ε(k, I_k) Δ_{I_k}(du) / J`` where ``I_k`` is the complement
of ``{k}``, ``ε(k, I_k)`` the sign of the shuffle ``(k, I_k)``, ``Δ_I`` the
minor on columns ``I`` and ``J`` the Jacobian ``sqrt(det du duᵀ)``.  Because
``det P > 0`` for the orthonormal frame transform, reference components give
the same orientation, and ``det[a; t] = J > 0`` by the Laplace expansion.
This is the one place where the global sign convention lives; if a current
ever disagreed with its expectation by a global sign, this rule is where to
look first.

Zeros are located with Newton's method on reference components; the zero set
and the Newton iteration ``-du⁺ u`` do not depend on the bundle frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .algebra import permutation_sign
from .ensemble import DriftSection, SectionSample
from .geometry import OrthoFrameField

RESIDUAL_TOL = 1e-10
POINT_FLOOR = 1e-6
CURVE_FLOOR = 1e-6
DEDUP_FRACTION = 1e-6
# largest tangent turn per continuation step (radians); bounds the step by 0.1 / curvature
MAX_TURN = 0.1
POLE_MARGIN = 1e-7
DEFAULT_SCAN = {2: 96, 3: 40}


class ExtractionError(RuntimeError):
    """The zero locus of a sample could not be extracted reliably."""


@dataclass(frozen=True)
class ZeroPoint:
    location: np.ndarray
    sign: int
    jacobian_det: float
    newton_residual: float


@dataclass(frozen=True)
class ZeroCurve:
    """Closed oriented polyline; ``points[-1]`` is an image of ``points[0]``.

    Coordinates are unwrapped (continuous across periodic boundaries).
    """

    points: np.ndarray
    tangents: np.ndarray
    jacobians: np.ndarray
    residuals: np.ndarray
    closed: bool = True

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# field evaluation
# ---------------------------------------------------------------------------


class SectionField:
    """``v = u₀ + Σ c_k s_k`` in reference components, evaluated exactly."""

    def __init__(self, sample: SectionSample, drift: DriftSection | None = None):
        self.sample = sample
        self.drift = drift
        basis = sample.basis
        self.basis = basis
        self.chart = basis.manifold.chart
        self._weights = None
        if basis.feature_model is not None:
            fn, T = basis.feature_model
            self._features = fn
            self._weights = np.einsum("k,kra->ra", sample.coefficients, T)

    def values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._weights is not None:
            out = np.einsum("ra,...a->...r", self._weights, self._features(x)[0])
        else:
            out = self.sample(x)
        if self.drift is not None:
            out = out + self.drift.value(x)
        return out

    def jacobians(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._weights is not None:
            out = np.einsum("ra,...ai->...ri", self._weights, self._features(x)[1])
        else:
            out = self.sample.jacobian(x)
        if self.drift is not None:
            out = out + self.drift.grad(x)
        return out

    def point(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Value ``(r,)`` and jacobian ``(r, m)`` at a single point."""
        W = self._weights
        if W is not None and self.drift is None and W.shape[1] == 2 * len(x) + 1:
            c, s = np.cos(x), np.sin(x)
            wc, ws = W[:, 1::2], W[:, 2::2]
            return W[:, 0] + wc @ c + ws @ s, ws * c - wc * s
        return self.values(x[None])[0], self.jacobians(x[None])[0]


def _frame_inverse(frame: OrthoFrameField, x) -> np.ndarray:
    return frame.jet(x)[0].P


# ---------------------------------------------------------------------------
# point case
# ---------------------------------------------------------------------------


def _axis_nodes(chart, n):
    """Scan-grid nodes per axis.

    Periodic axes are shifted by half a cell and closed axes get an odd cell
    count, so symmetric special points (0, π, the equator) fall inside cells
    rather than on grid lines.  Closed axes stop ``POLE_MARGIN`` short of the
    ends, where chart frames may be singular.
    """
    nodes = []
    for (lo, hi), periodic in zip(chart.box, chart.periodic):
        if periodic:
            nodes.append(lo + (hi - lo) * (np.arange(n) + 0.5) / n)
        else:
            margin = POLE_MARGIN * (hi - lo)
            nodes.append(np.linspace(lo + margin, hi - margin, (n | 1) + 1))
    return nodes


def _cell_corner_values(U, periodic):
    """Values at the ``2^m`` corners of every cell, shape ``(2^m, *cells, r)``."""
    m = len(periodic)
    corners = []
    for bits in range(2 ** m):
        V = U
        for axis in range(m):
            if bits >> axis & 1:
                V = np.roll(V, -1, axis=axis)
        corners.append(V)
    C = np.stack(corners)
    for axis in range(m):
        if not periodic[axis]:
            C = np.delete(C, -1, axis=axis + 1)
    return C


def _winding(C):
    """Winding number of a planar field around each 2D cell from its 4 corners."""
    order = [0, 1, 3, 2]  # counter-clockwise in (axis 0, axis 1)
    ang = np.arctan2(C[..., 1], C[..., 0])
    total = np.zeros(C.shape[1:-1])
    for a, b in zip(order, order[1:] + order[:1]):
        d = ang[b] - ang[a]
        total += (d + math.pi) % (2 * math.pi) - math.pi
    return np.rint(total / (2 * math.pi)).astype(int)


def _newton(field, x, chart, fixed_axis=None, max_iter=40):
    """Batched Newton iteration for ``v(x) = 0``; returns points and convergence flags.

    With ``fixed_axis`` the coordinate on that axis is held fixed (square solve in
    the remaining ones); otherwise the minimum-norm step is used.
    """
    x = np.array(x, dtype=float)
    active = np.ones(len(x), dtype=bool)
    conv = np.zeros(len(x), dtype=bool)
    m = x.shape[1]
    free = [i for i in range(m) if i != fixed_axis]
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        xa = x[idx]
        u = field.values(xa)
        J = field.jacobians(xa)[..., free]
        with np.errstate(all="ignore"):
            if J.shape[-1] == J.shape[-2]:
                step = np.linalg.solve(J, u[..., None])[..., 0]
            else:
                step = np.einsum("nij,nj->ni", np.linalg.pinv(J), u)
        bad = ~np.all(np.isfinite(step), axis=1)
        step[bad] = 0.0
        xa[:, free] -= step
        xa = chart.wrap(xa)
        inside = chart.contains(xa)
        x[idx] = xa
        small = np.linalg.norm(step, axis=1) <= 1e-13 * (1 + np.linalg.norm(xa, axis=1))
        done = small & inside & ~bad
        conv[idx[done]] = True
        active[idx[done | bad | ~inside]] = False
    return x, conv


def _dedupe(points, chart, radius):
    keep = []
    for k, p in enumerate(points):
        if all(np.linalg.norm(chart.displacement(points[j], p)) > radius for j in keep):
            keep.append(k)
    return keep


class ZeroLocator:
    """Reusable zero-set extraction for one ensemble, frame and drift.

    Grid data (basis values at scan nodes) is computed once and shared by all
    samples.
    """

    def __init__(self, frame: OrthoFrameField, drift: DriftSection | None = None,
                 scan_resolution: int | None = None, step_fraction: float = 0.25,
                 max_steps: int = 200_000):
        self.frame = frame
        self.basis = frame.basis
        self.drift = drift
        self.chart = self.basis.manifold.chart
        m, r = self.basis.dim, self.basis.rank
        if m not in (r, r + 1):
            raise ValueError("zero loci are supported for m = r and m = r + 1 only")
        self.codim = m - r
        self.scan_resolution = scan_resolution or DEFAULT_SCAN[m]
        self.nodes = _axis_nodes(self.chart, self.scan_resolution)
        mesh = np.meshgrid(*self.nodes, indexing="ij")
        self.grid_shape = mesh[0].shape
        pts = np.stack([g.ravel() for g in mesh], axis=-1)
        self._grid_points = pts
        self._grid_values = self.basis.value(pts)
        self._grid_drift = None if drift is None else drift.value(pts)
        spacing = [nd[1] - nd[0] for nd in self.nodes]
        self.cell = float(min(spacing))
        self.step = step_fraction * self.cell
        self.max_steps = max_steps
        self._min_cos = math.cos(MAX_TURN)
        self.dedup_radius = DEDUP_FRACTION * self.chart.diameter

    def field(self, sample: SectionSample) -> SectionField:
        return SectionField(sample, self.drift)

    def grid_values(self, sample: SectionSample) -> np.ndarray:
        U = np.einsum("gkr,k->gr", self._grid_values, sample.coefficients)
        if self._grid_drift is not None:
            U = U + self._grid_drift
        return U.reshape(self.grid_shape + (self.basis.rank,))

    # -- points -------------------------------------------------------------

    def points(self, sample: SectionSample) -> list[ZeroPoint]:
        if self.codim != 0:
            raise ValueError("point extraction needs m = r")
        field_ = self.field(sample)
        U = self.grid_values(sample)
        periodic = self.chart.periodic
        C = _cell_corner_values(U, periodic)
        candidate = np.all((C.min(axis=0) <= 0) & (C.max(axis=0) >= 0), axis=-1)
        winding = _winding(C) if self.basis.rank == 2 else None
        if winding is not None:
            # degree fallback: a cell can enclose a zero without a corner sign change
            candidate |= winding != 0
        idx = np.argwhere(candidate)
        seeds = np.stack([nd[idx[:, a]] + 0.5 * (nd[1] - nd[0])
                          for a, nd in enumerate(self.nodes)], axis=-1) if len(idx) else \
            np.zeros((0, self.basis.dim))
        x, conv = _newton(field_, seeds, self.chart)
        found = x[conv]
        order = np.lexsort(found.T[::-1]) if len(found) else np.zeros(0, dtype=int)
        found = found[order]
        found = found[_dedupe(found, self.chart, self.dedup_radius)] if len(found) else found
        zeros = self._finish_points(field_, found)
        if self.basis.rank == 2:
            expected = int(winding.sum())
            got = sum(z.sign for z in zeros if self._in_scan_region(z.location))
            if expected != got:
                raise ExtractionError(
                    f"signed count {got} disagrees with grid winding number {expected}")
        return zeros

    def _in_scan_region(self, x):
        for axis, nd in enumerate(self.nodes):
            if not self.chart.periodic[axis] and not (nd[0] <= x[axis] <= nd[-1]):
                return False
        return True

    def _finish_points(self, field_, found) -> list[ZeroPoint]:
        if len(found) == 0:
            return []
        P = _frame_inverse(self.frame, found)
        u = np.einsum("nab,nb->na", P, field_.values(found))
        du = P @ field_.jacobians(found)
        dets = np.linalg.det(du)
        res = np.linalg.norm(u, axis=1)
        zeros = []
        for k in range(len(found)):
            if res[k] > RESIDUAL_TOL:
                raise ExtractionError(f"Newton residual {res[k]:.3g} above tolerance")
            if abs(dets[k]) < POINT_FLOOR:
                raise ExtractionError(f"non-transversal zero (|det du| = {abs(dets[k]):.3g})")
            zeros.append(ZeroPoint(found[k].copy(), int(np.sign(dets[k])), float(dets[k]),
                                   float(res[k])))
        return zeros

    # -- curves -------------------------------------------------------------

    def _face_seeds(self, field_, U) -> np.ndarray:
        m = self.basis.dim
        periodic = self.chart.periodic
        seeds = []
        for k in range(m):
            p, q = [a for a in range(m) if a != k]
            corners = [U, np.roll(U, -1, axis=p), np.roll(U, -1, axis=q),
                       np.roll(np.roll(U, -1, axis=p), -1, axis=q)]
            C = np.stack(corners)
            mask = np.all((C.min(axis=0) <= 0) & (C.max(axis=0) >= 0), axis=-1)
            for axis in (p, q):
                if not periodic[axis]:
                    sl = [slice(None)] * m
                    sl[axis] = -1
                    mask[tuple(sl)] = False
            idx = np.argwhere(mask)
            if len(idx) == 0:
                continue
            start = np.stack([nd[idx[:, a]] for a, nd in enumerate(self.nodes)], axis=-1)
            for axis in (p, q):
                start[:, axis] += 0.5 * (self.nodes[axis][1] - self.nodes[axis][0])
            x, conv = _newton(field_, start, self.chart, fixed_axis=k)
            seeds.append(x[conv])
        if not seeds:
            return np.zeros((0, m))
        return np.concatenate(seeds)

    def _tangent(self, J):
        r, m = J.shape
        if r == 2:
            return np.cross(J[0], J[1])
        t = np.empty(m)
        for k in range(m):
            cols = [i for i in range(m) if i != k]
            t[k] = permutation_sign((k,) + tuple(cols)) * np.linalg.det(J[:, cols])
        return t

    def _correct(self, field_, y):
        for _ in range(12):
            u, J = field_.point(y)
            with np.errstate(all="ignore"):
                JJt = J @ J.T
                step = J.T @ np.linalg.solve(JJt, u)
            if not np.all(np.isfinite(step)):
                return None, None
            y = y - step
            if np.linalg.norm(step) <= 1e-13 * (1.0 + np.linalg.norm(y)):
                u, J = field_.point(y)
                return y, J
        return None, None

    def _trace(self, field_, seed):
        chart = self.chart
        s = self.step
        x = seed.copy()
        _, J = field_.point(x)
        t = self._tangent(J)
        t /= np.linalg.norm(t)
        pts, tans = [x], [t]
        for _ in range(self.max_steps):
            h = s
            while True:
                y, Jy = self._correct(field_, x + h * t)
                if y is not None:
                    ty = self._tangent(Jy)
                    norm = np.linalg.norm(ty)
                    if norm > 0:
                        ty = ty / norm
                        if np.linalg.norm(y - x) <= 1.5 * h and ty @ t >= self._min_cos:
                            break
                h *= 0.5
                if h < s * 2.0 ** -16:
                    raise ExtractionError("curve continuation failed to converge")
            if not np.all(chart.contains(y)):
                raise ExtractionError("zero curve leaves the chart (open curve)")
            d = chart.displacement(y, seed)
            x, t = y, ty
            pts.append(x)
            tans.append(t)
            if len(pts) > 3 and np.linalg.norm(d) < s and d @ t > 0:
                pts.append(x + d)
                tans.append(tans[0])
                return np.array(pts), np.array(tans)
        raise ExtractionError("curve continuation exceeded the step budget")

    def curves(self, sample: SectionSample) -> list[ZeroCurve]:
        if self.codim != 1:
            raise ValueError("curve tracing needs m = r + 1")
        field_ = self.field(sample)
        U = self.grid_values(sample)
        seeds = self._face_seeds(field_, U)
        chart = self.chart
        lo = np.array([a for a, _ in chart.box])
        L = chart.lengths
        box = np.where(chart.periodic, L, 3 * L)
        curves_pts = []
        tree = None
        for seed in seeds:
            key = np.mod(seed - lo, box)
            if tree is not None and tree.query(key)[0] < 0.6 * self.step:
                continue
            pts, tans = self._trace(field_, chart.wrap(seed))
            curves_pts.append((pts, tans))
            allpts = np.concatenate([c[0] for c in curves_pts])
            tree = cKDTree(np.mod(allpts - lo, box), boxsize=box)
        return [self._finish_curve(field_, pts, tans) for pts, tans in curves_pts]

    def _finish_curve(self, field_, pts, tans) -> ZeroCurve:
        wrapped = self.chart.wrap(pts)
        P = _frame_inverse(self.frame, wrapped)
        u = np.einsum("nab,nb->na", P, field_.values(wrapped))
        du = P @ field_.jacobians(wrapped)
        res = np.linalg.norm(u, axis=1)
        if res.max() > RESIDUAL_TOL:
            raise ExtractionError(f"curve vertex residual {res.max():.3g} above tolerance")
        smin = np.linalg.svd(du, compute_uv=False)[:, -1]
        if smin.min() < CURVE_FLOOR:
            raise ExtractionError(f"non-transversal curve vertex (σ_min = {smin.min():.3g})")
        return ZeroCurve(pts, tans, du, res)


# ---------------------------------------------------------------------------
# functional interface
# ---------------------------------------------------------------------------


def find_zero_points(sample: SectionSample, frame: OrthoFrameField,
                     drift: DriftSection | None = None, **kwargs) -> list[ZeroPoint]:
    return ZeroLocator(frame, drift, **kwargs).points(sample)


def trace_zero_curves(sample: SectionSample, frame: OrthoFrameField,
                      drift: DriftSection | None = None, **kwargs) -> list[ZeroCurve]:
    return ZeroLocator(frame, drift, **kwargs).curves(sample)


_GAUSS_T = 0.5 + 0.5 * np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0


def _segment_nodes(curve: ZeroCurve):
    """Gauss nodes on the cubic Hermite interpolant of every polyline segment.

    Each segment is the cubic through its two vertices with velocities
    ``|Δx| t`` (the traced unit tangents), so it follows the zero curve to
    fourth order in the step.  Returns points and velocities ``(S, 3, m)``;
    weights are ``_GAUSS_W``.  Coordinates stay unwrapped, which is harmless
    because sections and test forms are periodic on the chart.
    """
    p0, p1 = curve.points[:-1, None], curve.points[1:, None]
    L = np.linalg.norm(curve.points[1:] - curve.points[:-1], axis=1)[:, None, None]
    m0, m1 = L * curve.tangents[:-1, None], L * curve.tangents[1:, None]
    t = _GAUSS_T[None, :, None]
    t2, t3 = t * t, t * t * t
    pts = ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * m0
           + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * m1)
    vel = ((6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * m0
           + (-6 * t2 + 6 * t) * p1 + (3 * t2 - 2 * t) * m1)
    return pts, vel


def evaluate_current(zero_locus, eta) -> float:
    """``⟨η, [Z]⟩``: signed sum over points, or oriented polyline integral over curves.

    Curve integrals use 3-point Gauss quadrature on cubic Hermite segments
    (see :func:`_segment_nodes`).
    """
    zero_locus = list(zero_locus)
    if not zero_locus:
        return 0.0
    if isinstance(zero_locus[0], ZeroPoint):
        if eta.degree != 0:
            raise ValueError("points pair with functions (degree-0 forms)")
        locs = np.array([z.location for z in zero_locus])
        signs = np.array([z.sign for z in zero_locus], dtype=float)
        return float(np.sum(signs * eta(locs)[:, 0]))
    if eta.degree != 1:
        raise ValueError("curves pair with 1-forms")
    total = []
    for curve in zero_locus:
        pts, vel = _segment_nodes(curve)
        total.append(np.sum(_GAUSS_W[:, None] * eta(pts) * vel))
    return float(np.sum(total))


def coarea_check(sample: SectionSample, frame: OrthoFrameField, eta, curves=None,
                 drift: DriftSection | None = None) -> tuple[float, float]:
    """``⟨η, [Z]⟩`` directly and through the coarea identity.

    For each component ``η_k dx^k`` the restriction of ``dx^k`` to the curve is
    ``ε(k, I_k) G_{I_k}(du) ds`` with ``G_I = Δ_I(du) / J``, so the second
    route integrates ``Σ_k η_k ε(k, I_k) G_{I_k}`` against arclength, using
    the section's derivative instead of the curve's velocity.  Both routes
    share the quadrature nodes of :func:`evaluate_current`.  ``G`` is
    unchanged by a change of bundle frame, so reference components are used.
    """
    if eta.degree != 1:
        raise ValueError("coarea check is for curves and 1-forms")
    if curves is None:
        curves = trace_zero_curves(sample, frame, drift)
    field_ = SectionField(sample, drift)
    m = field_.chart.dim
    direct, coarea = [], []
    for curve in curves:
        pts, vel = _segment_nodes(curve)
        coeff = eta(pts)
        direct.append(np.sum(_GAUSS_W[:, None] * coeff * vel))
        J = field_.jacobians(pts)
        jac = np.sqrt(np.linalg.det(J @ np.swapaxes(J, -1, -2)))
        speed = np.linalg.norm(vel, axis=-1)
        acc = np.zeros(pts.shape[:-1])
        for k in range(m):
            cols = [i for i in range(m) if i != k]
            sign = permutation_sign((k,) + tuple(cols))
            acc += coeff[..., k] * sign * np.linalg.det(J[..., cols]) / jac
        coarea.append(np.sum(_GAUSS_W * acc * speed))
    return float(np.sum(direct)), float(np.sum(coarea))
