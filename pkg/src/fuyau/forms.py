"""Exterior algebra of (p,q)-forms with grid-array coefficients.

A form is stored as a dict mapping (I, J) -> coefficient array, meaning
sum over ascending multi-indices I, J of  c_{I,J} dz^I wedge dzbar^J
(all dz factors before all dzbar factors).  Coefficients may be scalars or
full grid arrays; derivatives are spectral.  This module is deliberately
dumb and slow — it exists to cross-check the closed-form wedge kernels and
to extract the first/zeroth-order coefficients of the rho operator, where
a transparent implementation beats a clever one.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import TorusGrid, _dz_values


class PQForm:
    """Complex differential form on the torus grid (mixed degrees allowed)."""

    __slots__ = ("grid", "components")

    def __init__(self, grid: TorusGrid, components: dict | None = None):
        self.grid = grid
        self.components = components or {}

    def copy(self) -> "PQForm":
        return PQForm(self.grid, dict(self.components))

    def _add_term(self, I, J, coeff):
        key = (tuple(I), tuple(J))
        if key in self.components:
            self.components[key] = self.components[key] + coeff
        else:
            self.components[key] = coeff

    def __add__(self, other: "PQForm") -> "PQForm":
        out = self.copy()
        for (I, J), c in other.components.items():
            out._add_term(I, J, c)
        return out

    def __mul__(self, scalar) -> "PQForm":
        return PQForm(
            self.grid, {k: scalar * c for k, c in self.components.items()}
        )

    __rmul__ = __mul__


def _merge_sign(a: tuple, b: tuple):
    """Sorted merge of two ascending index tuples; None if they collide."""
    if set(a) & set(b):
        return None, None
    merged = list(a + b)
    sign = 1
    for i in range(len(merged)):
        for j in range(i + 1, len(merged)):
            if merged[i] > merged[j]:
                sign = -sign
    return tuple(sorted(merged)), sign


def wedge(f1: PQForm, f2: PQForm) -> PQForm:
    out = PQForm(f1.grid)
    for (I1, J1), c1 in f1.components.items():
        for (I2, J2), c2 in f2.components.items():
            I, sI = _merge_sign(I1, I2)
            if I is None:
                continue
            J, sJ = _merge_sign(J1, J2)
            if J is None:
                continue
            # moving the dz^I2 block past the dzbar^J1 block
            swap = -1 if (len(J1) * len(I2)) % 2 else 1
            out._add_term(I, J, (sI * sJ * swap) * (c1 * c2))
    return out


def d_holo(f: PQForm) -> PQForm:
    """The del operator: sum_j d_j(coeff) dz^j ^ (term)."""
    g = f.grid
    out = PQForm(g)
    for (I, J), c in f.components.items():
        carr = np.asarray(c, dtype=complex) + np.zeros(g.shape, dtype=complex)
        for j in range(g.n):
            if j in I:
                continue
            pos = sum(1 for i in I if i < j)
            sign = -1 if pos % 2 else 1
            newI = tuple(sorted(I + (j,)))
            out._add_term(newI, J, sign * _dz_values(carr, g, j, bar=False))
    return out


def d_antiholo(f: PQForm) -> PQForm:
    """The delbar operator: sum_j d_jbar(coeff) dzbar^j ^ (term)."""
    g = f.grid
    out = PQForm(g)
    for (I, J), c in f.components.items():
        carr = np.asarray(c, dtype=complex) + np.zeros(g.shape, dtype=complex)
        front = -1 if len(I) % 2 else 1
        for j in range(g.n):
            if j in J:
                continue
            pos = sum(1 for l in J if l < j)
            sign = front * (-1 if pos % 2 else 1)
            newJ = tuple(sorted(J + (j,)))
            out._add_term(I, newJ, sign * _dz_values(carr, g, j, bar=True))
    return out


def i_ddbar(f: PQForm) -> PQForm:
    return 1j * d_holo(d_antiholo(f))


# ----------------------------------------------------------------------
# constructors
# ----------------------------------------------------------------------

def scalar_form(grid: TorusGrid, values) -> PQForm:
    return PQForm(grid, {((), ()): np.asarray(values, dtype=complex)})


def one_one_form(grid: TorusGrid, matrix_values: np.ndarray) -> PQForm:
    """Psi = i * M[..., p, q] dz^p ^ dzbar^q (the HermitianField convention)."""
    out = PQForm(grid)
    for p in range(grid.n):
        for q in range(grid.n):
            out._add_term((p,), (q,), 1j * matrix_values[..., p, q])
    return out


def dz_basis(grid: TorusGrid, i: int) -> PQForm:
    return PQForm(grid, {((i,), ()): np.asarray(1.0 + 0.0j)})


def omega_form(grid: TorusGrid) -> PQForm:
    out = PQForm(grid)
    for p in range(grid.n):
        out._add_term((p,), (p,), np.asarray(1j * grid.scale_s))
    return out


def omega_power(grid: TorusGrid, m: int) -> PQForm:
    out = scalar_form(grid, 1.0)
    om = omega_form(grid)
    for _ in range(m):
        out = wedge(out, om)
    return out


def top_density(f: PQForm) -> np.ndarray:
    """Coefficient of a (n,n)-form relative to omega_hat^n.

    omega_hat^n = s^n n! i^n (-1)^{n(n-1)/2} dz^{1..n} ^ dzbar^{1..n}.
    """
    g = f.grid
    n = g.n
    full = tuple(range(n))
    c = f.components.get((full, full), 0.0)
    norm = g.scale_s**n * math.factorial(n) * (1j**n) * (-1) ** (n * (n - 1) // 2)
    dens = np.asarray(c, dtype=complex) / norm
    return dens + np.zeros(g.shape, dtype=complex)
