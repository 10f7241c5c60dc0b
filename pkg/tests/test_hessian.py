"""Symmetric-function algebra: route agreement, derivative oracles, bounds."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuyau.geometry import ScalarField, build_grid, complex_hessian
from fuyau.hessian import (
    Endomorphism,
    lemma1_bound,
    sigma,
    sigma_first,
    sigma_jet,
    sigma_second_contract,
    sigma_via_charpoly,
    sigma_via_eigenvalues,
    upsilon_margin,
)

rng = np.random.default_rng(90817263)


def _random_hermitian(n, seed=None):
    r = np.random.default_rng(seed) if seed is not None else rng
    m = r.standard_normal((n, n)) + 1j * r.standard_normal((n, n))
    return 0.5 * (m + m.conj().T)


def _random_endo(n, seed=None):
    """Hermitian matrix index-raised by a random positive diagonal metric."""
    r = np.random.default_rng(seed) if seed is not None else rng
    H = _random_hermitian(n)
    c = np.exp(r.standard_normal())
    return H.T / c


# ----------------------------------------------------------------------
# sigma values
# ----------------------------------------------------------------------


def test_sigma_diag_123():
    h = np.diag([1.0, 2.0, 3.0])
    assert sigma(2, h) == pytest.approx(11.0)
    assert sigma(1, h) == pytest.approx(6.0)
    assert sigma(3, h) == pytest.approx(6.0)


def test_sigma_identity():
    assert sigma(3, np.eye(3)) == pytest.approx(1.0)
    assert sigma(0, np.eye(3)) == 1.0


def test_sigma_out_of_range():
    with pytest.raises(ValueError):
        sigma(4, np.eye(3))
    with pytest.raises(ValueError):
        sigma(-1, np.eye(2))


@pytest.mark.parametrize("n", [2, 3])
def test_sigma_three_routes_agree(n):
    for trial in range(200):
        h = _random_endo(n)
        for l in range(0, n + 1):
            a = sigma(l, h)
            b = sigma_via_eigenvalues(l, h)
            c = sigma_via_charpoly(l, h)
            scale = 1.0 + abs(a)
            assert abs(a - b) <= 1e-10 * scale
            assert abs(a - c) <= 1e-10 * scale


def test_sigma_batched_matches_loop():
    h = rng.standard_normal((5, 7, 3, 3)) + 1j * rng.standard_normal((5, 7, 3, 3))
    h = 0.5 * (h + np.conj(np.swapaxes(h, -1, -2)))
    batch = sigma(2, h)
    assert batch.shape == (5, 7)
    assert batch[2, 3] == pytest.approx(sigma(2, h[2, 3]))


@given(
    st.lists(st.floats(min_value=-5, max_value=5), min_size=2, max_size=3),
)
@settings(max_examples=60, deadline=None)
def test_sigma_routes_on_diagonals(diag):
    h = np.diag(np.array(diag))
    n = len(diag)
    for l in range(n + 1):
        a = sigma(l, h)
        b = sigma_via_charpoly(l, h)
        assert abs(a - b) <= 1e-10 * (1 + abs(a))


def test_sigma_conjugation_invariance():
    for n in (2, 3):
        h = _random_endo(n)
        q, _ = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
        hc = q @ h @ q.conj().T
        for l in range(1, n + 1):
            assert abs(sigma(l, h) - sigma(l, hc)) <= 1e-10 * (1 + abs(sigma(l, h)))


# ----------------------------------------------------------------------
# first derivative tensor
# ----------------------------------------------------------------------


def test_sigma_first_diagonal_formula():
    h = np.diag([1.0, 2.0, 3.0])
    T = sigma_first(2, h)
    assert np.allclose(T, np.diag([5.0, 4.0, 3.0]))


def test_sigma_first_l1_is_identity():
    h = _random_endo(3)
    assert np.allclose(sigma_first(1, h), np.eye(3))


@pytest.mark.parametrize("n,l", [(2, 1), (2, 2), (3, 1), (3, 2), (3, 3)])
def test_sigma_first_matches_central_difference(n, l):
    eps = 1e-5
    for trial in range(20):
        h = _random_endo(n)
        B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        T = sigma_first(l, h)
        analytic = np.einsum("ij,ji->", T, B)
        # sigma of a non-Hermitian-similar perturbation may be complex;
        # compare against the complexified minors sum
        fd = (_sigma_complex(l, h + eps * B) - _sigma_complex(l, h - eps * B)) / (2 * eps)
        assert abs(analytic - fd) <= 1e-8 * (1 + abs(analytic))


def _sigma_complex(l, m):
    """Minors sum without the real cast, for complex directional probes."""
    from itertools import combinations

    n = m.shape[-1]
    if l == 0:
        return 1.0
    total = 0.0
    for rows in combinations(range(n), l):
        total += np.linalg.det(m[np.ix_(rows, rows)])
    return total


def test_sigma_jet_diagonal_frame():
    lam = np.array([0.7, -1.3, 2.2])
    jet = sigma_jet(2, np.diag(lam))
    expect = np.diag([lam[1] + lam[2], lam[0] + lam[2], lam[0] + lam[1]])
    assert np.max(np.abs(jet.first - expect)) < 1e-9
    assert jet.metric_used == "ghat"
    assert jet.value == pytest.approx(sigma_via_eigenvalues(2, np.diag(lam)))


def test_endomorphism_real_spectrum():
    grid = build_grid(2, 8)
    u = ScalarField(grid, np.cos(2 * np.pi * grid.axis_coordinate(0)))
    H = complex_hessian(u)
    endo = Endomorphism.from_hessian(H, grid.scale_s)
    lam = np.linalg.eigvals(endo.matrix)
    assert np.max(np.abs(lam.imag)) <= 1e-10


# ----------------------------------------------------------------------
# second derivative contraction
# ----------------------------------------------------------------------


def test_sigma_second_identity_probe():
    for n in (2, 3):
        h = _random_endo(n)
        val = sigma_second_contract(2, h, np.eye(n), np.eye(n))
        assert np.real(val) == pytest.approx(n * (n - 1))
        assert abs(np.imag(val)) < 1e-12


def test_sigma_second_zero_direction():
    h = _random_endo(3)
    B = np.zeros((3, 3))
    C = rng.standard_normal((3, 3))
    assert sigma_second_contract(3, h, B, C) == 0


def test_sigma_second_symmetric_bilinear():
    h = _random_endo(3)
    B = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    C = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    ab = sigma_second_contract(3, h, B, C)
    ba = sigma_second_contract(3, h, C, B)
    assert abs(ab - ba) <= 1e-12 * (1 + abs(ab))
    two = sigma_second_contract(3, h, 2.0 * B, C)
    assert abs(two - 2 * ab) <= 1e-12 * (1 + abs(ab))


@pytest.mark.parametrize("n,l", [(2, 2), (3, 2), (3, 3)])
def test_sigma_second_matches_finite_difference(n, l):
    eps = 1e-4
    for trial in range(20):
        h = _random_endo(n)
        B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        C = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        analytic = sigma_second_contract(l, h, B, C)
        fd = (
            _sigma_complex(l, h + eps * B + eps * C)
            - _sigma_complex(l, h + eps * B - eps * C)
            - _sigma_complex(l, h - eps * B + eps * C)
            + _sigma_complex(l, h - eps * B - eps * C)
        ) / (4 * eps**2)
        assert abs(analytic - fd) <= 1e-6 * (1 + abs(analytic))


def test_sigma_second_diagonal_two_sum_structure():
    # at diagonal h with distinct eigenvalues, the contraction against
    # B, C reduces to sums of sigma_{l-2}(lambda | p q) over index pairs
    lam = np.array([0.9, -0.4, 1.7])
    h = np.diag(lam)
    B = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    C = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))

    def s_minus(p, q):
        rest = [lam[i] for i in range(3) if i not in (p, q)]
        return float(np.prod(rest)) if rest else 1.0

    expect = 0.0
    for p in range(3):
        for q in range(3):
            if p == q:
                continue
            expect += s_minus(p, q) * (B[p, p] * C[q, q] - B[q, p] * C[p, q])
    got = sigma_second_contract(3, h, B, C)
    assert abs(got - expect) <= 1e-10 * (1 + abs(expect))


# ----------------------------------------------------------------------
# elementary bounds
# ----------------------------------------------------------------------


def test_lemma1_example():
    lhs, rhs = lemma1_bound(2, 3, np.array([1.0, 2.0, 3.0]))
    assert lhs == pytest.approx(11.0)
    assert rhs == pytest.approx(14.0)
    assert lhs <= rhs


def test_lemma1_equality_at_equal_entries():
    lam = np.full(4, 0.37)
    lhs, rhs = lemma1_bound(2, 4, lam)
    assert abs(lhs - rhs) <= 1e-12 * rhs


def test_lemma1_randomized_sweep():
    r = np.random.default_rng(5150)
    for trial in range(10_000):
        m = int(r.integers(1, 7))
        l = int(r.integers(1, m + 1))
        lam = r.standard_normal(m) * np.exp(r.standard_normal())
        lhs, rhs = lemma1_bound(l, m, lam)
        assert lhs <= rhs * (1 + 1e-13)


@given(st.integers(1, 6), st.data())
@settings(max_examples=80, deadline=None)
def test_lemma1_hypothesis(m, data):
    l = data.draw(st.integers(1, m))
    lam = data.draw(
        st.lists(
            st.floats(min_value=-1e3, max_value=1e3, allow_nan=False),
            min_size=m,
            max_size=m,
        )
    )
    lhs, rhs = lemma1_bound(l, m, np.array(lam))
    assert lhs <= rhs * (1 + 1e-12) + 1e-300


# ----------------------------------------------------------------------
# admissible region margins
# ----------------------------------------------------------------------


def _pk(gamma=2.0, k=1, alpha=0.1, delta=0.5, tau=2**-7 / 2.0):
    P = SimpleNamespace(gamma=gamma, k=k, alpha=alpha)
    K = SimpleNamespace(delta=delta, tau=tau)
    return P, K


def test_upsilon_constant_large_M():
    grid = build_grid(2, 8)
    M = 1e4
    u = ScalarField(grid, np.full(grid.shape, np.log(M)))
    H = complex_hessian(u)
    P, K = _pk()
    m1, m2 = upsilon_margin(u, H, P, K)
    assert m1 == pytest.approx(K.delta - M**-P.gamma)
    assert m2 == pytest.approx(K.tau)
    assert m1 > 0 and m2 > 0


def test_upsilon_tau_value_n3_k1():
    tau = 2**-7 / 2.0  # C^1_2 = 2
    assert tau == pytest.approx(0.00390625)


def test_upsilon_boundary_is_zero_margin():
    grid = build_grid(2, 8)
    P, K = _pk(gamma=2.0, delta=0.25)
    # e^{-2u} = 0.25 at the max of -u  <=>  min u = log 2
    u = ScalarField(grid, np.full(grid.shape, np.log(2.0)))
    m1, _ = upsilon_margin(u, complex_hessian(u), P, K)
    assert abs(m1) < 1e-14


def test_upsilon_negative_margin_is_data():
    grid = build_grid(2, 8)
    P, K = _pk(delta=1e-6)
    u = ScalarField(grid, np.zeros(grid.shape))
    m1, m2 = upsilon_margin(u, complex_hessian(u), P, K)
    assert m1 < 0  # not an exception
