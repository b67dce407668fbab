"""Named test forms used to probe zero-locus currents.

A test form of degree ``p`` on an ``m``-dimensional chart is stored through its
coefficients on ``dx^J`` for all increasing ``J`` with ``|J| = p``, in
lexicographic order.  Names are pinned because experiment results refer to
exact integrands:

``const``
    the function 1 (degree 0)
``z``, ``zsq``
    ``cos θ`` and ``cos² θ`` on the sphere (degree 0)
``cosx1cosx2``
    ``cos x¹ cos x²`` on a torus (degree 0)
``dx3``
    ``dx³`` on the 3-torus (degree 1, closed)
``cosx1_dx2``
    ``cos x¹ dx²`` on the 3-torus (degree 1, not closed)
``sinx1sinx3_dx2``
    ``sin x¹ sin x³ dx²`` on the 3-torus (degree 1, not closed)

Coordinates are 1-based in the names and 0-based in arrays.  ``a+b`` sums two
forms of the same degree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .algebra import multi_indices


@dataclass(frozen=True)
class TestForm:
    name: str
    dim: int
    degree: int
    coefficients: Callable[[np.ndarray], np.ndarray]
    amplitude: float = 1.0

    __test__ = False  # not a pytest class

    def __call__(self, x) -> np.ndarray:
        """Coefficients ``(..., C(m, p))`` scaled by the amplitude."""
        return self.amplitude * self.coefficients(np.asarray(x, dtype=float))

    def scaled(self, amplitude: float) -> "TestForm":
        return TestForm(self.name, self.dim, self.degree, self.coefficients,
                        self.amplitude * amplitude)

    def __add__(self, other: "TestForm") -> "TestForm":
        if (self.dim, self.degree) != (other.dim, other.degree):
            raise ValueError("can only add forms of equal dimension and degree")
        return TestForm(f"{self.name}+{other.name}", self.dim, self.degree,
                        lambda x: self(x) + other(x))


def _function(dim, fn):
    return lambda x: fn(x)[..., None]


def _one_form(dim, axis, fn):
    def coeffs(x):
        out = np.zeros(x.shape[:-1] + (dim,))
        out[..., axis] = fn(x)
        return out
    return coeffs


def _builtin(name: str, dim: int) -> TestForm:
    ones = lambda x: np.ones(x.shape[:-1])
    table = {
        "const": (None, 0, _function(dim, ones)),
        "z": (2, 0, _function(dim, lambda x: np.cos(x[..., 0]))),
        "zsq": (2, 0, _function(dim, lambda x: np.cos(x[..., 0]) ** 2)),
        "cosx1cosx2": (None, 0, _function(dim, lambda x: np.cos(x[..., 0]) * np.cos(x[..., 1]))),
        "dx3": (3, 1, _one_form(3, 2, ones)),
        "cosx1_dx2": (3, 1, _one_form(3, 1, lambda x: np.cos(x[..., 0]))),
        "sinx1sinx3_dx2": (3, 1, _one_form(3, 1, lambda x: np.sin(x[..., 0]) * np.sin(x[..., 2]))),
    }
    if name not in table:
        raise KeyError(f"unknown test form {name!r}; choose from {sorted(table)}")
    need, degree, coeffs = table[name]
    if need is not None and need != dim:
        raise ValueError(f"test form {name!r} needs a {need}-dimensional chart")
    return TestForm(name, dim, degree, coeffs)


def get_test_form(expression: str, dim: int, amplitude: float = 1.0) -> TestForm:
    """Parse ``name`` or ``name1+name2+...``."""
    parts = [p.strip() for p in expression.split("+") if p.strip()]
    if not parts:
        raise ValueError("empty test form")
    form = _builtin(parts[0], dim)
    for p in parts[1:]:
        form = form + _builtin(p, dim)
    out = form.scaled(amplitude)
    ncoef = len(multi_indices(dim, out.degree))
    probe = out(np.zeros((1, dim)))
    if probe.shape != (1, ncoef):
        raise AssertionError("test form returned the wrong number of coefficients")
    return TestForm(expression, dim, out.degree, out.coefficients, out.amplitude)
