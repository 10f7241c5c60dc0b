"""Elementary symmetric polynomial algebra on Hermitian endomorphisms.

Everything here works on endomorphisms h^i{}_j = g^{ik bar} H_{k bar j}
obtained by raising an index of a Hermitian form with a metric.  Such a
matrix is similar to a Hermitian one, so its spectrum is real even though
the matrix itself need not be normal.  All routines accept either a single
n x n matrix or a batched array of shape (..., n, n) and broadcast.

Three independent routes to sigma_l are kept alive on purpose (principal
minors, characteristic polynomial, eigenvalues); the first is the one used
in anger, the other two exist to catch sign and normalization mistakes.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .geometry import HermitianField, ScalarField

# ----------------------------------------------------------------------
# endomorphisms
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Endomorphism:
    """A (possibly batched) matrix h^i{}_j with real spectrum.

    matrix[..., i, j] is h^i{}_j.  Built from a Hermitian field by raising
    an index with a conformal metric c * (identity): h = H^T / c, which in
    the storage convention values[..., p, q] = H_{q bar p} gives the
    transpose below.
    """

    matrix: np.ndarray

    @classmethod
    def from_hessian(cls, H: HermitianField, metric_scale) -> "Endomorphism":
        scale = np.asarray(metric_scale)
        if scale.ndim > 0:
            scale = scale[..., None, None]
        return cls(np.swapaxes(H.values, -1, -2) / scale)

    def eigenvalues(self) -> np.ndarray:
        lam = np.linalg.eigvals(self.matrix)
        return np.sort(lam.real, axis=-1)


def _mat(h) -> np.ndarray:
    if isinstance(h, Endomorphism):
        return h.matrix
    return np.asarray(h)


# ----------------------------------------------------------------------
# sigma_l: three routes
# ----------------------------------------------------------------------


def sigma(l: int, h) -> np.ndarray | float:
    """sigma_l(h) as the sum of principal l x l minors."""
    m = _mat(h)
    n = m.shape[-1]
    if not 0 <= l <= n:
        raise ValueError(f"sigma_{l} undefined for {n}x{n} matrices")
    if l == 0:
        return np.ones(m.shape[:-2]) if m.ndim > 2 else 1.0
    total = 0.0
    for rows in combinations(range(n), l):
        sub = m[..., rows, :][..., :, rows]
        total = total + np.linalg.det(sub)
    out = np.real(total)
    return float(out) if np.ndim(out) == 0 else out


def sigma_via_eigenvalues(l: int, h) -> np.ndarray | float:
    """Oracle: elementary symmetric polynomial of the eigenvalues."""
    m = _mat(h)
    n = m.shape[-1]
    if not 0 <= l <= n:
        raise ValueError(f"sigma_{l} undefined for {n}x{n} matrices")
    lam = np.linalg.eigvals(m).real
    if l == 0:
        return np.ones(m.shape[:-2]) if m.ndim > 2 else 1.0
    total = 0.0
    for idx in combinations(range(n), l):
        total = total + np.prod(lam[..., idx], axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def sigma_via_charpoly(l: int, h) -> np.ndarray | float:
    """Oracle: coefficient extraction by the Faddeev-LeVerrier recursion.

    det(tI + h) = sum_l sigma_l(h) t^{n-l}; the recursion produces the
    sigma_l without any eigendecomposition.
    """
    m = _mat(h)
    n = m.shape[-1]
    if not 0 <= l <= n:
        raise ValueError(f"sigma_{l} undefined for {n}x{n} matrices")
    if l == 0:
        return np.ones(m.shape[:-2]) if m.ndim > 2 else 1.0
    # char poly det(tI - h) = t^n + a_1 t^{n-1} + ... with a_l = (-1)^l sigma_l
    eye = np.broadcast_to(np.eye(n), m.shape)
    M = np.zeros_like(eye)
    a = np.ones(m.shape[:-2])
    for k in range(1, l + 1):
        M = m @ M + np.asarray(a)[..., None, None] * eye
        a = -np.einsum("...ij,...ji->...", m, M).real / k
    out = (-1) ** l * a
    return float(out) if np.ndim(out) == 0 else out


# ----------------------------------------------------------------------
# derivative tensors
# ----------------------------------------------------------------------


def sigma_first(l: int, h) -> np.ndarray:
    """Newton transformation T_{l-1}(h) = sum_i (-1)^i sigma_{l-1-i}(h) h^i.

    Satisfies d sigma_l(h)[dh] = trace(T_{l-1}(h) dh).  At a diagonal h
    this is diag(sigma_{l-1}(lambda | p)).
    """
    m = _mat(h)
    n = m.shape[-1]
    if not 1 <= l <= n:
        raise ValueError(f"sigma_{l} has no first derivative tensor here")
    eye = np.broadcast_to(np.eye(n), m.shape)
    out = np.zeros_like(m, dtype=complex) if np.iscomplexobj(m) else np.zeros_like(m, dtype=float)
    power = eye
    for i in range(l):
        coeff = sigma(l - 1 - i, m)
        out = out + (-1) ** i * np.asarray(coeff)[..., None, None] * power
        if i + 1 < l:
            power = power @ m
    return out


def sigma_second_contract(l: int, h, B, C) -> np.ndarray | float:
    """Polarized second derivative D^2 sigma_l(h)[B, C].

    Closed multilinear forms (valid in any frame, no eigenvalue
    degeneracy issues):

        l = 2:  tr B tr C - tr(C B)
        l = 3:  sigma_1 tr B tr C - tr(h C) tr B - tr C tr(h B)
                - sigma_1 tr(C B) + tr(h C B) + tr(C h B)
    """
    m, Bm, Cm = _mat(h), _mat(B), _mat(C)
    n = m.shape[-1]
    if not 2 <= l <= n:
        raise ValueError(f"sigma_{l} second derivative needs 2 <= l <= n")
    trB = np.einsum("...ii->...", Bm)
    trC = np.einsum("...ii->...", Cm)
    if l == 2:
        out = trB * trC - np.einsum("...ij,...ji->...", Cm, Bm)
    elif l == 3:
        s1 = np.einsum("...ii->...", m)
        out = (
            s1 * trB * trC
            - np.einsum("...ij,...ji->...", m, Cm) * trB
            - trC * np.einsum("...ij,...ji->...", m, Bm)
            - s1 * np.einsum("...ij,...ji->...", Cm, Bm)
            + np.einsum("...ij,...jk,...ki->...", m, Cm, Bm)
            + np.einsum("...ij,...jk,...ki->...", Cm, m, Bm)
        )
    else:  # pragma: no cover — n <= 3 everywhere in this code base
        raise ValueError(f"no closed form for l={l}")
    return complex(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SigmaJet:
    """sigma_l and its first derivative tensor at a point, with a tag
    recording which metric raised the index."""

    value: np.ndarray | float
    first: np.ndarray
    metric_used: str


def sigma_jet(l: int, h, metric_used: str = "ghat") -> SigmaJet:
    return SigmaJet(value=sigma(l, h), first=sigma_first(l, h), metric_used=metric_used)


# ----------------------------------------------------------------------
# elementary bounds and the admissible region
# ----------------------------------------------------------------------


def lemma1_bound(l: int, m: int, lam) -> tuple[float, float]:
    """(|sigma_l(lam)|, (C^l_m / m^{l/2}) |lam|^l), the Maclaurin-type
    bound; the contract lhs <= rhs holds for every real vector."""
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 1 or len(lam) != m:
        raise ValueError("lam must be a vector of length m")
    if not 1 <= l <= m:
        raise ValueError("need 1 <= l <= m")
    lhs = 0.0
    for idx in combinations(range(m), l):
        lhs += float(np.prod(lam[list(idx)]))
    rhs = comb(m, l) / m ** (l / 2.0) * float(np.linalg.norm(lam)) ** l
    return abs(lhs), rhs


def upsilon_margin(u: ScalarField, H: HermitianField, P, K) -> tuple[float, float]:
    """Margins of the admissible region.

    m1 = delta - max e^{-gamma u};
    m2 = tau - max |alpha| (e^{-u} |Hessian endomorphism|_F)^k,
    with the Frobenius norm measuring the endomorphism raised by the
    background metric.  Membership is m1 > 0 and m2 > 0; negative margins
    are returned as data.
    """
    uvals = np.real(u.values)
    m1 = float(K.delta - np.exp(-P.gamma * uvals).max())
    hend = np.swapaxes(H.values, -1, -2) / u.grid.scale_s
    frob = np.sqrt(np.sum(np.abs(hend) ** 2, axis=(-1, -2)))
    m2 = float(K.tau - abs(P.alpha) * ((np.exp(-uvals) * frob) ** P.k).max())
    return m1, m2
