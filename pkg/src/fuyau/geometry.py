"""Flat complex torus discretization and exterior-algebra densities.

The manifold is X = C^n/(Z+iZ)^n with coordinates z^j = x^j + i y^j,
x^j, y^j in [0,1).  The background Kahler metric is the flat
g_hat_{kbar j} = s * delta_{kj} with the conformal factor s chosen once per
dimension so that the total volume  integral of omega_hat^n  equals 1.
With the measure convention used throughout (omega_hat^n itself, not
omega_hat^n/n!), the volume of the unit box is n! * (2s)^n, which pins

    s = (2^n * n!)^(-1/n).

Everything lives on a uniform N^(2n) grid with axis order
(x^1, y^1, ..., x^n, y^n); derivatives are Fourier pseudospectral with the
Nyquist bin of every differentiated axis zeroed.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

__all__ = [
    "TorusGrid",
    "ScalarField",
    "HermitianField",
    "build_grid",
    "partial_z",
    "partial_zbar",
    "complex_hessian",
    "integrate",
    "wedge_density",
    "scale_factor",
    "write_snapshot",
    "read_snapshot",
]


def _workers() -> int | None:
    """FFT worker count from FUYAU_THREADS (None = library default)."""
    raw = os.environ.get("FUYAU_THREADS", "").strip()
    if not raw:
        return None
    w = int(raw)
    return w if w > 0 else None


def _fftn(a: np.ndarray, axes=None) -> np.ndarray:
    return sfft.fftn(a, axes=axes, workers=_workers())


def _ifftn(a: np.ndarray, axes=None) -> np.ndarray:
    return sfft.ifftn(a, axes=axes, workers=_workers())


def scale_factor(n: int) -> float:
    """The conformal factor s with unit total volume (see module docstring)."""
    import math

    return (2.0**n * math.factorial(n)) ** (-1.0 / n)


# ----------------------------------------------------------------------
# grid
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TorusGrid:
    """Discretized flat complex n-torus.

    Attributes
    ----------
    n : complex dimension (2 or 3 for the public constructor).
    N : points per real coordinate.
    scale_s : conformal factor on g_hat (unit total volume).
    wavevectors : integer frequency lattice per axis, shape (N,).
    """

    n: int
    N: int
    scale_s: float
    wavevectors: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple:
        return (self.N,) * (2 * self.n)

    @property
    def npoints(self) -> int:
        return self.N ** (2 * self.n)

    def axis_coordinate(self, axis: int) -> np.ndarray:
        """Grid values of one real axis, broadcast to the full shape."""
        x = np.arange(self.N) / self.N
        shp = [1] * (2 * self.n)
        shp[axis] = self.N
        return np.broadcast_to(x.reshape(shp), self.shape)

    def _deriv_symbol(self, axis: int) -> np.ndarray:
        """Spectral symbol of d/d(axis), Nyquist zeroed, broadcastable."""
        m = self.wavevectors.astype(float).copy()
        if self.N % 2 == 0:
            m[self.N // 2] = 0.0
        sym = 2.0j * np.pi * m
        shp = [1] * (2 * self.n)
        shp[axis] = self.N
        return sym.reshape(shp)

    def dz_symbol(self, j: int, bar: bool = False) -> np.ndarray:
        """Symbol of d/dz^j (or d/dzbar^j), broadcastable to the grid shape."""
        sx = self._deriv_symbol(2 * j)
        sy = self._deriv_symbol(2 * j + 1)
        return 0.5 * (sx + 1.0j * sy) if bar else 0.5 * (sx - 1.0j * sy)

    def nyquist_mask(self) -> np.ndarray:
        """Boolean spectrum mask, True where any axis sits at its Nyquist bin."""
        if self.N % 2 != 0:
            return np.zeros(self.shape, dtype=bool)
        hit = np.zeros(self.N, dtype=bool)
        hit[self.N // 2] = True
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(2 * self.n):
            shp = [1] * (2 * self.n)
            shp[ax] = self.N
            mask |= hit.reshape(shp)
        return mask


def _make_grid(n: int, N: int) -> TorusGrid:
    wav = np.rint(sfft.fftfreq(N) * N).astype(int)
    return TorusGrid(n=n, N=N, scale_s=scale_factor(n), wavevectors=wav)


def build_grid(n: int, N: int) -> TorusGrid:
    """Construct the unit-volume flat torus grid.

    Parameters
    ----------
    n : complex dimension, 2 or 3 (the minor-expansion kernels used by
        wedge_density are specialized to these).
    N : points per real coordinate; even, at least 4.  Powers of two give
        the fastest transforms, but any even N is legal — the spectral
        tables only need a well-defined Nyquist bin.
    """
    if n not in (2, 3):
        raise ValueError(f"complex dimension must be 2 or 3, got {n}")
    if N < 4 or N % 2 != 0:
        raise ValueError(f"N must be an even integer >= 4, got {N}")
    return _make_grid(n, N)


# ----------------------------------------------------------------------
# fields
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarField:
    """One number per grid point (real or complex)."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"scalar field shape {self.values.shape} != grid {self.grid.shape}"
            )


@dataclass(frozen=True)
class HermitianField:
    """An n x n complex matrix per grid point.

    Index convention: values[..., p, q] stores the coefficient Psi_{qbar p}
    of the (1,1)-form Psi = i Psi_{qbar p} dz^p wedge dzbar^q.  For the
    complex Hessian of u this is values[..., p, q] = d_p d_{qbar} u.
    """

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        n = self.grid.n
        if self.values.shape != self.grid.shape + (n, n):
            raise ValueError(
                f"hermitian field shape {self.values.shape} != "
                f"{self.grid.shape + (n, n)}"
            )

    def hermitize(self) -> "HermitianField":
        v = 0.5 * (self.values + np.conj(np.swapaxes(self.values, -1, -2)))
        return HermitianField(self.grid, v)


def constant_hermitian(grid: TorusGrid, matrix: np.ndarray) -> HermitianField:
    m = np.asarray(matrix, dtype=complex)
    vals = np.broadcast_to(m, grid.shape + (grid.n, grid.n)).copy()
    return HermitianField(grid, vals)


def metric_matrix_field(grid: TorusGrid) -> HermitianField:
    """omega_hat as a HermitianField (matrix s * identity everywhere)."""
    return constant_hermitian(grid, grid.scale_s * np.eye(grid.n))


# ----------------------------------------------------------------------
# spectral derivatives
# ----------------------------------------------------------------------


def _dz_values(values: np.ndarray, grid: TorusGrid, j: int, bar: bool) -> np.ndarray:
    axes = (2 * j, 2 * j + 1)
    spec = _fftn(values.astype(complex), axes=axes)
    spec *= grid.dz_symbol(j, bar=bar)
    return _ifftn(spec, axes=axes)


def partial_z(f: ScalarField, j: int) -> ScalarField:
    """d/dz^j = (d/dx^j - i d/dy^j)/2, spectral (exact on resolved modes)."""
    if not 0 <= j < f.grid.n:
        raise ValueError(f"axis {j} out of range for n={f.grid.n}")
    return ScalarField(f.grid, _dz_values(f.values, f.grid, j, bar=False))


def partial_zbar(f: ScalarField, j: int) -> ScalarField:
    """d/dzbar^j = (d/dx^j + i d/dy^j)/2, spectral."""
    if not 0 <= j < f.grid.n:
        raise ValueError(f"axis {j} out of range for n={f.grid.n}")
    return ScalarField(f.grid, _dz_values(f.values, f.grid, j, bar=True))


def complex_hessian(u: ScalarField) -> HermitianField:
    """All second mixed derivatives of a real field.

    Returns H with H[..., p, q] = d_p d_{qbar} u; exactly Hermitian by
    construction — the lower triangle is the conjugate of the upper, and
    the diagonal symbols are real so the diagonal entries keep only their
    real part (the imaginary residue is pure roundoff).
    """
    grid = u.grid
    n = grid.n
    spec = _fftn(u.values.astype(complex))
    H = np.empty(grid.shape + (n, n), dtype=complex)
    for p in range(n):
        sp = grid.dz_symbol(p, bar=False)
        for q in range(p, n):
            sq = grid.dz_symbol(q, bar=True)
            if q == p:
                H[..., p, p] = np.real(_ifftn(spec * sp * sq))
            else:
                H[..., p, q] = _ifftn(spec * sp * sq)
    for p in range(n):
        for q in range(p):
            H[..., p, q] = np.conj(H[..., q, p])
    return HermitianField(grid, H)


def gradient_z(u: ScalarField) -> np.ndarray:
    """Stacked holomorphic derivatives, shape grid + (n,): [..., j] = d_j u."""
    g = u.grid
    out = np.empty(g.shape + (g.n,), dtype=complex)
    spec = _fftn(u.values.astype(complex))
    for j in range(g.n):
        out[..., j] = _ifftn(spec * g.dz_symbol(j, bar=False))
    return out


def laplacian(f: ScalarField) -> ScalarField:
    """Metric Laplacian ghat^{j kbar} d_j d_{kbar} = (1/4s) * (Euclidean)."""
    g = f.grid
    spec = _fftn(f.values.astype(complex))
    sym = np.zeros(g.shape, dtype=complex)
    for j in range(g.n):
        sym = sym + g.dz_symbol(j, bar=False) * g.dz_symbol(j, bar=True)
    out = _ifftn(spec * sym) / g.scale_s
    if not np.iscomplexobj(f.values):
        out = out.real
    return ScalarField(g, out)


def integrate(f: ScalarField) -> float:
    """Integral against omega_hat^n; with unit volume this is the grid mean."""
    return float(np.mean(f.values).real)


# ----------------------------------------------------------------------
# wedge densities (mixed discriminants)
# ----------------------------------------------------------------------
#
# For (1,1)-forms Psi_i with matrices A_i and the flat metric matrix
# G = s*I, the ratio (Psi_1 ^ ... ^ Psi_l ^ omega_hat^m) / omega_hat^n
# equals D(A_1,...,A_l, G,...,G) / D(G,...,G) where D is the mixed
# discriminant normalized by D(A,...,A) = det A.  With G = s*I this is
# D(A_1,...,A_l, I x m) / s^l.  The n <= 3 kernels below are the closed
# forms of D with identity slots filled in.


def _tr(A):
    return np.einsum("...ii->...", A)


def _trprod(A, B):
    return np.einsum("...ij,...ji->...", A, B)


def _trprod3(A, B, C):
    return np.einsum("...ij,...jk,...ki->...", A, B, C)


def _mixed_disc_density(mats: list, n: int, s: float) -> np.ndarray:
    ell = len(mats)
    if ell == 0:
        base = 1.0
        return base
    if ell == 1:
        return _tr(mats[0]) / (n * s)
    if n == 2 and ell == 2:
        A, B = mats
        return (_tr(A) * _tr(B) - _trprod(A, B)) / (2.0 * s * s)
    if n == 3 and ell == 2:
        A, B = mats
        return (_tr(A) * _tr(B) - _trprod(A, B)) / (6.0 * s * s)
    if n == 3 and ell == 3:
        A, B, C = mats
        tA, tB, tC = _tr(A), _tr(B), _tr(C)
        out = tA * tB * tC
        out -= tA * _trprod(B, C)
        out -= tB * _trprod(A, C)
        out -= tC * _trprod(A, B)
        out += _trprod3(A, B, C)
        out += _trprod3(A, C, B)
        return out / (6.0 * s**3)
    raise ValueError(f"no wedge kernel for n={n}, l={ell}")


def wedge_density(H_list: list, m: int) -> ScalarField:
    """Pointwise density (H_1 ^ ... ^ H_l ^ omega_hat^m) / omega_hat^n.

    Multilinear and symmetric in the Hermitian arguments; len(H_list)+m
    must equal n.  Real part returned (exact for Hermitian inputs).
    """
    if not H_list:
        raise ValueError("need at least one form (use a constant field for 1)")
    grid = H_list[0].grid
    n = grid.n
    if len(H_list) + m != n:
        raise ValueError(f"need len(H_list)+m == n, got {len(H_list)}+{m} != {n}")
    for H in H_list:
        if H.grid is not grid and H.grid.shape != grid.shape:
            raise ValueError("wedge arguments live on different grids")
    dens = _mixed_disc_density([H.values for H in H_list], n, grid.scale_s)
    return ScalarField(grid, np.asarray(dens).real + np.zeros(grid.shape))


def wedge_partial(H_list: list, m: int) -> "HermitianField":
    """Derivative of wedge_density with respect to one extra slot.

    Returns the matrix field W with

        wedge_density([A] + H_list, m) = trace(A @ W)   pointwise

    for every Hermitian field A — the mixed-discriminant cofactor of the
    fixed arguments.  Useful when the same fixed forms are wedged against
    many directions A: the multilinear kernel collapses to one pointwise
    trace per direction.
    """
    if not H_list:
        raise ValueError("need at least one fixed form to infer the grid")
    grid = H_list[0].grid
    n = grid.n
    if len(H_list) + m != n - 1:
        raise ValueError(
            f"need len(H_list)+m == n-1, got {len(H_list)}+{m} != {n - 1}"
        )
    s = grid.scale_s
    eye = np.broadcast_to(np.eye(n), grid.shape + (n, n))
    ell = len(H_list)
    if ell == 1:
        B = H_list[0].values
        norm = 2.0 * s * s if n == 2 else 6.0 * s * s
        W = (_tr(B)[..., None, None] * eye - B) / norm
    elif ell == 2 and n == 3:
        B, C = H_list[0].values, H_list[1].values
        tB = _tr(B)[..., None, None]
        tC = _tr(C)[..., None, None]
        BC = B @ C
        scal = tB * tC - _trprod(B, C)[..., None, None]
        W = (scal * eye - tB * C - tC * B + BC
             + np.conj(np.swapaxes(BC, -1, -2))) / (6.0 * s**3)
    else:
        raise ValueError(f"no wedge cofactor kernel for n={n}, l={ell + 1}")
    return HermitianField(grid, np.ascontiguousarray(W))


# ----------------------------------------------------------------------
# spectral refinement (trigonometric interpolation between grids)
# ----------------------------------------------------------------------


def pad_spectrum(spec: np.ndarray, grid: TorusGrid, fine: TorusGrid) -> np.ndarray:
    """Embed an N-grid spectrum into a finer grid's spectrum (modes kept
    at their signed frequencies, Nyquist bins of the coarse grid dropped)."""
    N, Nf = grid.N, fine.N
    d = 2 * grid.n
    out = np.zeros(fine.shape, dtype=complex)
    half = N // 2  # coarse bins kept: -half+1 .. half-1
    lo = half - 1
    src = tuple(np.r_[0 : lo + 1, N - lo : N] for _ in range(d))
    dst = tuple(np.r_[0 : lo + 1, Nf - lo : Nf] for _ in range(d))
    out[np.ix_(*dst)] = spec[np.ix_(*src)]
    out *= (Nf / N) ** d
    return out


def truncate_spectrum(spec: np.ndarray, fine: TorusGrid, grid: TorusGrid) -> np.ndarray:
    """Adjoint of pad_spectrum: keep the coarse band, zero coarse Nyquist."""
    N, Nf = grid.N, fine.N
    d = 2 * grid.n
    out = np.zeros(grid.shape, dtype=complex)
    lo = N // 2 - 1
    src = tuple(np.r_[0 : lo + 1, Nf - lo : Nf] for _ in range(d))
    dst = tuple(np.r_[0 : lo + 1, N - lo : N] for _ in range(d))
    out[np.ix_(*dst)] = spec[np.ix_(*src)]
    out *= (N / Nf) ** d
    return out


# ----------------------------------------------------------------------
# binary snapshots
# ----------------------------------------------------------------------

_MAGIC = b"FYHF"
_VERSION = 1
_HDR = struct.Struct("<4sIIIB")

KIND_SCALAR_REAL = 0
KIND_SCALAR_COMPLEX = 1
KIND_HERMITIAN = 2


def write_snapshot(path, fld) -> None:
    """Write a field in the little-endian FYHF container."""
    grid = fld.grid
    if isinstance(fld, HermitianField):
        kind = KIND_HERMITIAN
        flat = np.ascontiguousarray(fld.values, dtype=complex)
        payload = flat.view(np.float64)
    elif np.iscomplexobj(fld.values):
        kind = KIND_SCALAR_COMPLEX
        payload = np.ascontiguousarray(fld.values, dtype=complex).view(np.float64)
    else:
        kind = KIND_SCALAR_REAL
        payload = np.ascontiguousarray(fld.values, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(_MAGIC, _VERSION, grid.n, grid.N, kind))
        fh.write(payload.tobytes())


def read_snapshot(path, grid: TorusGrid | None = None):
    """Read a FYHF snapshot; validates header and payload size."""
    with open(path, "rb") as fh:
        hdr = fh.read(_HDR.size)
        if len(hdr) != _HDR.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, N, kind = _HDR.unpack(hdr)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        raw = np.frombuffer(fh.read(), dtype=np.float64)
    if grid is None:
        grid = build_grid(n, N)
    elif (grid.n, grid.N) != (n, N):
        raise ValueError(f"{path}: snapshot is n={n},N={N}, grid is "
                         f"n={grid.n},N={grid.N}")
    npts = N ** (2 * n)
    if kind == KIND_SCALAR_REAL:
        if raw.size != npts:
            raise ValueError(f"{path}: payload size mismatch")
        return ScalarField(grid, raw.reshape(grid.shape).copy())
    if kind == KIND_SCALAR_COMPLEX:
        if raw.size != 2 * npts:
            raise ValueError(f"{path}: payload size mismatch")
        return ScalarField(grid, raw.view(complex).reshape(grid.shape).copy())
    if kind == KIND_HERMITIAN:
        if raw.size != 2 * npts * n * n:
            raise ValueError(f"{path}: payload size mismatch")
        vals = raw.view(complex).reshape(grid.shape + (n, n)).copy()
        return HermitianField(grid, vals)
    raise ValueError(f"{path}: unknown kind {kind}")
