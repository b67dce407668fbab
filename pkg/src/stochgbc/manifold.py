"""Single-chart models of compact oriented manifolds, with tensor-product quadrature.

Each model is one coordinate box covering the manifold up to a null set.  The
box orientation ``dx^1 ∧ ... ∧ dx^m`` is the manifold orientation, and
``volume_density`` is the Riemannian volume relative to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

# nodes and weights of the 3-point Gauss-Legendre rule on [-1, 1]
_GL3_NODES = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GL3_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0

DEFAULT_RESOLUTION = {2: 200, 3: 64}


@dataclass(frozen=True)
class ChartDomain:
    dim: int
    box: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]
    periodic: tuple[bool, ...]

    def __post_init__(self):
        if not (len(self.box) == len(self.resolution) == len(self.periodic) == self.dim):
            raise ValueError("box, resolution and periodic must each have one entry per axis")
        for lo, hi in self.box:
            if not hi > lo:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        if any(n < 1 for n in self.resolution):
            raise ValueError("resolution must be positive")

    @property
    def lengths(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.box])

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.lengths))

    def with_resolution(self, resolution) -> "ChartDomain":
        if np.isscalar(resolution):
            resolution = (int(resolution),) * self.dim
        return ChartDomain(self.dim, self.box, tuple(int(n) for n in resolution), self.periodic)

    def wrap(self, x):
        """Reduce periodic coordinates into the box."""
        x = np.array(x, dtype=float)
        for axis, (lo, hi) in enumerate(self.box):
            if self.periodic[axis]:
                x[..., axis] = lo + np.mod(x[..., axis] - lo, hi - lo)
        return x

    def displacement(self, x, y):
        """``y - x`` with periodic axes reduced to the nearest image."""
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        for axis, (lo, hi) in enumerate(self.box):
            if self.periodic[axis]:
                L = hi - lo
                d[..., axis] -= L * np.round(d[..., axis] / L)
        return d

    def contains(self, x, margin: float = 0.0) -> np.ndarray:
        """Whether non-periodic coordinates lie strictly inside the box (by ``margin``)."""
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape[:-1], dtype=bool)
        for axis, (lo, hi) in enumerate(self.box):
            if not self.periodic[axis]:
                ok &= (x[..., axis] > lo + margin) & (x[..., axis] < hi - margin)
        return ok

    def random_points(self, n: int, rng: np.random.Generator, margin: float = 0.0) -> np.ndarray:
        lo = np.array([a for a, _ in self.box])
        hi = np.array([b for _, b in self.box])
        pad = np.where(self.periodic, 0.0, margin * (hi - lo))
        return rng.uniform(lo + pad, hi - pad, size=(n, self.dim))


def axis_rule(lo: float, hi: float, n: int, periodic: bool) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for one axis.

    Periodic axes use the composite midpoint rule with ``n`` nodes.  Other axes
    use composite 3-point Gauss-Legendre on ``ceil(n/3)`` panels, an open rule
    of order six that never evaluates the endpoints (where chart frames may be
    singular).
    """
    if periodic:
        h = (hi - lo) / n
        return lo + h * (np.arange(n) + 0.5), np.full(n, h)
    panels = max(1, math.ceil(n / 3))
    h = (hi - lo) / panels
    left = lo + h * np.arange(panels)
    nodes = (left[:, None] + 0.5 * h * (_GL3_NODES + 1.0)).ravel()
    weights = np.tile(0.5 * h * _GL3_WEIGHTS, panels)
    return nodes, weights


@dataclass(frozen=True)
class ManifoldModel:
    name: str
    chart: ChartDomain
    volume_density: Callable[[np.ndarray], np.ndarray]
    excluded_set_measure_zero: str = ""

    @property
    def dim(self) -> int:
        return self.chart.dim

    def quadrature(self, resolution=None) -> tuple[np.ndarray, np.ndarray]:
        """Grid points ``(N, m)`` and weights ``(N,)`` for ``dx^1...dx^m``."""
        chart = self.chart if resolution is None else self.chart.with_resolution(resolution)
        rules = [axis_rule(lo, hi, n, p)
                 for (lo, hi), n, p in zip(chart.box, chart.resolution, chart.periodic)]
        grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
        wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
        points = np.stack([g.ravel() for g in grids], axis=-1)
        weights = np.prod(np.stack([w.ravel() for w in wgrids], axis=-1), axis=-1)
        return points, weights

    def volume(self, resolution=None) -> float:
        return integrate_top_form(self, lambda x: np.ones(len(x)), resolution)


def integrate_top_form(mfd: ManifoldModel, density, resolution=None,
                       chart_coefficient: bool = False, chunk: int = 16384) -> float:
    """Integrate a top form over the manifold.

    Parameters
    ----------
    mfd
        The manifold model.
    density
        Vectorized callable taking points ``(N, m)`` and returning ``(N,)``.
    resolution
        Per-axis node counts (scalar or tuple); defaults to the chart's.
    chart_coefficient
        If False (default) ``density`` is a function and the integrand is
        ``density * volume_density``.  If True, ``density`` is already the
        coefficient of ``dx^1 ∧ ... ∧ dx^m``.
    chunk
        Number of points passed to ``density`` per call (bounds memory).
    """
    points, weights = mfd.quadrature(resolution)
    values = evaluate_chunked(density, points, chunk)
    if not np.all(np.isfinite(values)):
        raise ValueError("density has non-finite values on the quadrature grid")
    if not chart_coefficient:
        values = values * mfd.volume_density(points)
    # np.sum uses pairwise summation, so the result is bit-stable for a fixed grid
    return float(np.sum(values * weights))


def evaluate_chunked(fn, points: np.ndarray, chunk: int = 16384) -> np.ndarray:
    """``fn`` on consecutive blocks of ``points``, concatenated into one flat array."""
    parts = []
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        vals = np.asarray(fn(block), dtype=float).reshape(-1)
        if vals.shape[0] != block.shape[0]:
            raise ValueError("density returned the wrong number of values")
        parts.append(vals)
    return np.concatenate(parts) if parts else np.zeros(0)


def builtin_sphere2(resolution: int | None = None) -> ManifoldModel:
    """Unit sphere in spherical coordinates ``(θ, φ) ∈ (0, π) × (0, 2π)``."""
    n = resolution or DEFAULT_RESOLUTION[2]
    chart = ChartDomain(2, ((0.0, math.pi), (0.0, 2.0 * math.pi)), (n, n), (False, True))
    return ManifoldModel(
        "sphere2", chart, lambda x: np.sin(np.asarray(x)[..., 0]),
        "the two poles and the meridian φ = 0")


def builtin_torus(dim: int, resolution: int | None = None) -> ManifoldModel:
    """Flat torus ``(R / 2πZ)^dim``."""
    if dim not in (2, 3):
        raise ValueError(f"unsupported torus dimension {dim}")
    n = resolution or DEFAULT_RESOLUTION[dim]
    chart = ChartDomain(dim, ((0.0, 2.0 * math.pi),) * dim, (n,) * dim, (True,) * dim)
    return ManifoldModel(f"torus{dim}", chart,
                         lambda x: np.ones(np.asarray(x).shape[:-1]),
                         "none (the chart is a fundamental domain)")


MANIFOLDS = {
    "sphere2": builtin_sphere2,
    "torus2": lambda resolution=None: builtin_torus(2, resolution),
    "torus3": lambda resolution=None: builtin_torus(3, resolution),
}


def get_manifold(name: str, resolution: int | None = None) -> ManifoldModel:
    try:
        return MANIFOLDS[name](resolution)
    except KeyError:
        raise KeyError(f"unknown manifold {name!r}; choose from {sorted(MANIFOLDS)}") from None
