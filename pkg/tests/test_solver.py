"""Newton iteration, bordered Krylov solves, and the continuity march."""

import dataclasses
import io
import json

import numpy as np
import pytest

from fuyau.geometry import ScalarField, build_grid, integrate
from fuyau.operator import ProblemSpec, extract_lrho, make_linearizer, residual
from fuyau.solver import (
    ContinuationTrace,
    LeftAdmissibleSet,
    NewtonConfig,
    SolverError,
    StepFloorReached,
    _krylov_bordered,
    admissible_margins,
    compute_constants,
    continuity_march,
    estimate_diagnostics,
    find_min_scale,
    krylov_bordered,
    lemma2_sandwich,
    newton_solve,
    renormalize,
    third_derivative_tensor,
    uniqueness_probe,
)


# ----------------------------------------------------------------------
# field builders
# ----------------------------------------------------------------------


def wave(grid, amp, seed, band=1, nmodes=4):
    """Random real trig polynomial, sup-normalized to amp."""
    rng = np.random.default_rng(seed)
    vals = np.zeros(grid.shape)
    d = 2 * grid.n
    for _ in range(nmodes):
        m = rng.integers(-band, band + 1, size=d)
        if not m.any():
            m[rng.integers(d)] = 1
        phase = np.zeros(grid.shape)
        for ax in range(d):
            if m[ax]:
                phase = phase + 2 * np.pi * m[ax] * grid.axis_coordinate(ax)
        vals = vals + rng.normal() * np.cos(phase + rng.uniform(0, 2 * np.pi))
    return vals * (amp / np.abs(vals).max())


def herm_waves(grid, amp, seed, nmodes=3):
    """Pointwise-Hermitian matrix field, band 1, sup-scale about amp."""
    rng = np.random.default_rng(seed)
    n = grid.n
    base = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    vals = np.broadcast_to(
        (base + base.conj().T) / 2, grid.shape + (n, n)
    ).copy().astype(complex)
    for _ in range(nmodes):
        m = rng.integers(-1, 2, size=2 * n)
        if not m.any():
            continue
        phase = np.zeros(grid.shape)
        for ax in range(2 * n):
            if m[ax]:
                phase = phase + 2 * np.pi * m[ax] * grid.axis_coordinate(ax)
        A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        blob = np.exp(1j * phase)[..., None, None] * A
        vals = vals + blob + np.conj(np.swapaxes(blob, -1, -2))
    peak = np.abs(vals).max()
    from fuyau.geometry import HermitianField

    return HermitianField(grid, vals * (amp / peak)).hermitize()


def zero_mu(grid):
    return ScalarField(grid, np.zeros(grid.shape))


def trivial_problem(grid, M=4.0, k=1, gamma=2.0, alpha=0.3):
    """rho = 0, mu = 0: the path of constants."""
    from fuyau.geometry import HermitianField

    n = grid.n
    rho = HermitianField(grid, np.zeros(grid.shape + (n, n), dtype=complex))
    P = ProblemSpec(n=n, k=k, gamma=gamma, alpha=alpha, rho=rho,
                    mu=zero_mu(grid), M=M, grid=grid)
    return P, extract_lrho(rho, grid)


def manufactured_problem(grid, k=1, gamma=2.0, alpha=0.02, M=64.0,
                         rho_amp=0.05, u_amp=None, seed=11):
    """Plant a target u*, read off the mu that makes it a solution at t=1."""
    rho = herm_waves(grid, rho_amp, seed)
    P0 = ProblemSpec(n=grid.n, k=k, gamma=gamma, alpha=alpha, rho=rho,
                     mu=zero_mu(grid), M=M, grid=grid)
    coeffs = extract_lrho(rho, grid)
    if u_amp is None:
        u_amp = 0.01 * np.log(M)
    u_star = renormalize(
        ScalarField(grid, np.log(M) + wave(grid, u_amp, seed + 1)), M
    )
    mu_star = residual(u_star, 1.0, P0, coeffs)  # lhs at u*, since mu = 0
    P = dataclasses.replace(P0, mu=mu_star)
    return P, coeffs, u_star


# ----------------------------------------------------------------------
# fixtures
# ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def g2():
    return build_grid(2, 8)


@pytest.fixture(scope="module")
def triv2(g2):
    return trivial_problem(g2, M=4.0)


@pytest.fixture(scope="module")
def triv_march(triv2):
    P, coeffs = triv2
    return continuity_march(P, coeffs)


@pytest.fixture(scope="module")
def big2(g2):
    # rho at full strength needs a large scale before the gates open
    rho = herm_waves(g2, 0.4, 1)
    P = ProblemSpec(n=2, k=1, gamma=2.0, alpha=0.3, rho=rho,
                    mu=zero_mu(g2), M=1000.0, grid=g2)
    return P, extract_lrho(rho, g2)


@pytest.fixture(scope="module")
def man2(g2):
    return manufactured_problem(g2)


@pytest.fixture(scope="module")
def man2_march(man2):
    P, coeffs, _ = man2
    return continuity_march(P, coeffs)


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


def test_config_defaults_valid():
    cfg = NewtonConfig()
    assert cfg.tol_residual == 1e-10
    assert cfg.max_iters == 30
    assert cfg.damping == 0.5


@pytest.mark.parametrize("kw", [
    {"tol_residual": 0.0},
    {"max_iters": 0},
    {"damping": 0.0},
    {"damping": 1.0},
    {"max_halvings": -1},
    {"krylov_tol": -1e-12},
    {"krylov_max": 0},
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        NewtonConfig(**kw)


# ----------------------------------------------------------------------
# Newton at fixed t
# ----------------------------------------------------------------------


def test_newton_t0_converges_in_zero_iterations(big2):
    P, coeffs = big2
    u0 = ScalarField(P.grid, np.full(P.grid.shape, np.log(P.M)))
    u, rep = newton_solve(u0, 0.0, P, coeffs)
    assert rep.iterations == 0
    assert rep.final_residual <= 1e-12
    assert np.abs(u.values - np.log(P.M)).max() <= 1e-12


def test_newton_manufactured_recovery(man2):
    P, coeffs, u_star = man2
    bump = wave(P.grid, 1e-3, seed=5)
    u0 = ScalarField(P.grid, u_star.values + bump)
    u, rep = newton_solve(u0, 1.0, P, coeffs)
    assert rep.iterations >= 1
    assert np.abs(u.values - u_star.values).max() <= 1e-8
    assert rep.final_residual <= 1e-10


def test_newton_rejects_start_outside_admissible_set(big2):
    P, coeffs = big2
    u0 = ScalarField(P.grid, np.log(P.M) + wave(P.grid, 5.0, seed=9))
    with pytest.raises(LeftAdmissibleSet) as exc:
        newton_solve(u0, 0.0, P, coeffs)
    assert exc.value.margins is not None
    assert min(exc.value.margins) <= 0


def test_newton_warm_start_idempotent(man2, man2_march):
    P, coeffs, _ = man2
    u_final, _ = man2_march
    u, rep = newton_solve(u_final, 1.0, P, coeffs)
    assert rep.iterations == 0
    assert np.abs(u.values - u_final.values).max() <= 1e-13


# ----------------------------------------------------------------------
# bordered Krylov
# ----------------------------------------------------------------------


def test_krylov_constant_coefficient_one_shot(big2):
    # at the flat start with t = 0 the Jacobian IS the preconditioner
    # model, so the preconditioned system is the identity
    P, coeffs = big2
    grid = P.grid
    u0 = ScalarField(grid, np.full(grid.shape, np.log(P.M)))
    lin = make_linearizer(u0, 0.0, P, coeffs)

    def J(h):
        return ScalarField(grid, grid.n * lin(h).values)

    rhs_vals = wave(grid, 1.0, seed=2)
    rhs_vals -= rhs_vals.mean()
    rhs = ScalarField(grid, rhs_vals)

    h, lam, iters = _krylov_bordered(J, u0, rhs, NewtonConfig(), k=P.k)
    assert iters <= 2
    assert abs(lam) <= 1e-12

    # exact answer: divide the spectrum by M^k times the symbol
    from fuyau.geometry import _fftn, _ifftn

    sym = np.zeros(grid.shape)
    modes = np.fft.fftfreq(grid.N, d=1.0 / grid.N)
    for ax in range(2 * grid.n):
        shp = [1] * (2 * grid.n)
        shp[ax] = grid.N
        sym = sym + modes.reshape(shp) ** 2
    sym = -(np.pi**2 / grid.scale_s) * sym * P.M**P.k
    sym.flat[0] = 1.0
    spec = _fftn(rhs_vals.astype(complex))
    spec.flat[0] = 0.0
    expected = _ifftn(spec / sym).real
    assert np.abs(h.values - expected).max() <= 1e-12 * (1 + np.abs(expected).max())


def test_krylov_solution_verified_by_reapplication(big2):
    P, coeffs = big2
    grid = P.grid
    u0 = renormalize(
        ScalarField(grid, np.log(P.M) + wave(grid, 0.01, seed=3)), P.M
    )
    lin = make_linearizer(u0, 0.7, P, coeffs)

    def J(h):
        return ScalarField(grid, grid.n * lin(h).values)

    rhs_vals = wave(grid, 1.0, seed=4)
    rhs_vals -= rhs_vals.mean()
    rhs = ScalarField(grid, rhs_vals)

    h = krylov_bordered(J, u0, rhs, k=P.k)
    scale = 1 + np.abs(rhs_vals).max()
    gap = J(h).values - rhs_vals
    # operator gap within tolerance plus the (certified tiny) multiplier
    assert np.abs(gap).max() <= 2.1e-12 * scale
    w = np.exp(u0.values)
    assert abs(np.mean(h.values * w)) <= 1e-12 * (1 + np.abs(h.values).max() * w.max())


def test_krylov_incompatible_rhs_rejected(big2):
    P, coeffs = big2
    grid = P.grid
    u0 = ScalarField(grid, np.full(grid.shape, np.log(P.M)))
    lin = make_linearizer(u0, 0.0, P, coeffs)

    def J(h):
        return ScalarField(grid, grid.n * lin(h).values)

    rhs = ScalarField(grid, np.ones(grid.shape))
    with pytest.raises(ValueError, match="compatibility"):
        krylov_bordered(J, u0, rhs, k=P.k)


# ----------------------------------------------------------------------
# the march: trivial path
# ----------------------------------------------------------------------


def test_march_trivial_path_stays_constant(triv2, triv_march):
    P, _ = triv2
    u, trace = triv_march
    assert np.abs(u.values - np.log(P.M)).max() <= 1e-12
    accepted = trace.accepted_steps
    assert accepted[0]["t"] == 0.0
    assert accepted[-1]["t"] == 1.0
    for rec in accepted:
        assert rec["newton_iters"] == 0
        assert rec["lemma2_ok"]
        assert min(rec["upsilon_margins"]) > 0
    # nothing to reject on the path of constants
    assert len(accepted) == len(trace.steps)


def test_march_trivial_diagnostics_vanish(triv2, triv_march):
    P, _ = triv2
    u, trace = triv_march
    diag = estimate_diagnostics(u, P)
    assert diag.c1_diag == 0.0
    assert diag.c2_diag == 0.0
    assert diag.c3_diag == 0.0
    assert abs(diag.sup_eu_over_M - 1) <= 1e-12
    assert abs(diag.M_over_inf_eu - 1) <= 1e-12
    last = trace.accepted_steps[-1]["estimate_diagnostics"]
    assert last["c3_diag"] == 0.0


def test_march_checkpoint_callback_sees_accepted_path(triv2):
    P, coeffs = triv2
    seen = []
    continuity_march(P, coeffs, checkpoint_cb=lambda t, u: seen.append(t))
    _, trace = continuity_march(P, coeffs)
    assert seen == [rec["t"] for rec in trace.accepted_steps]


# ----------------------------------------------------------------------
# the march: manufactured target
# ----------------------------------------------------------------------


def test_march_recovers_manufactured_solution(man2, man2_march):
    _, _, u_star = man2
    u, _ = man2_march
    assert np.abs(u.values - u_star.values).max() <= 1e-7


def test_march_accepted_steps_monotone_and_complete(man2_march):
    _, trace = man2_march
    ts = [rec["t"] for rec in trace.accepted_steps]
    assert ts[0] == 0.0
    assert ts[-1] == 1.0
    assert all(b > a for a, b in zip(ts, ts[1:]))
    for rec in trace.accepted_steps:
        assert rec["final_residual"] <= 1e-10
        assert rec["lemma2_ok"]
        assert 1 - 2.0**-6 - 1e-12 <= rec["lemma2_min"]
        assert rec["lemma2_max"] <= 1 + 2.0**-6 + 1e-12
        assert min(rec["upsilon_margins"]) > 0


def test_march_keeps_normalization_exact(man2, man2_march):
    P, _, _ = man2
    u, _ = man2_march
    mass = integrate(ScalarField(u.grid, np.exp(u.values)))
    assert abs(mass - P.M) <= 1e-12 * P.M


def test_march_reports_recipe_delta_margin(man2_march):
    # margin against the full recipe delta is reported at every accepted
    # step; it is far below the operational (ellipticity) margin
    _, trace = man2_march
    for rec in trace.accepted_steps:
        m1_spec = rec["m1_spec_delta"]
        assert isinstance(m1_spec, float)
        assert m1_spec <= rec["upsilon_margins"][0] + 1e-15


def test_march_small_scale_hits_floor(g2):
    rho = herm_waves(g2, 0.4, 1)
    P = ProblemSpec(n=2, k=1, gamma=2.0, alpha=0.3, rho=rho,
                    mu=zero_mu(g2), M=8.0, grid=g2)
    coeffs = extract_lrho(rho, g2)
    with pytest.raises(StepFloorReached) as exc:
        continuity_march(P, coeffs)
    assert exc.value.margins is not None
    assert min(exc.value.margins) <= 0
    assert exc.value.last_good_t is None  # never even left t = 0


def test_march_small_grid_second_branch():
    # k = 2 on the coarse three-fold grid: exercises the padded sigma
    # assembly inside a full march
    grid = build_grid(3, 4)
    P, coeffs, u_star = manufactured_problem(
        grid, k=2, gamma=2.0, alpha=0.02, M=128.0, rho_amp=0.05,
        u_amp=0.02, seed=17,
    )
    cfg = NewtonConfig(tol_residual=1e-8)
    u, trace = continuity_march(P, coeffs, cfg)
    assert np.abs(u.values - u_star.values).max() <= 1e-6
    assert trace.accepted_steps[-1]["t"] == 1.0


# ----------------------------------------------------------------------
# trace export
# ----------------------------------------------------------------------


def test_trace_jsonl_roundtrip(man2_march):
    _, trace = man2_march
    buf = io.StringIO()
    trace.dump_jsonl(buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == len(trace.steps)
    keys = {
        "t", "dt", "step_accepted", "newton_iters", "final_residual",
        "krylov_iterations", "halvings", "upsilon_margins",
        "m1_spec_delta", "estimate_diagnostics", "lemma2_ok",
        "lemma2_min", "lemma2_max", "reason",
    }
    for line in lines:
        rec = json.loads(line)
        assert keys <= set(rec)
        assert not any("wall" in k or "time" in k for k in rec)
    # deterministic serialization
    buf2 = io.StringIO()
    trace.dump_jsonl(buf2)
    assert buf.getvalue() == buf2.getvalue()


def test_trace_accepted_property():
    tr = ContinuationTrace()
    tr.steps.append({"step_accepted": True, "t": 0.0})
    tr.steps.append({"step_accepted": False, "t": 0.1})
    assert [s["t"] for s in tr.accepted_steps] == [0.0]


# ----------------------------------------------------------------------
# scale search
# ----------------------------------------------------------------------


def test_min_scale_constant_path_bracket(g2):
    # with rho = mu = 0 the gate margin at the flat start is
    # 1 - M^{-gamma}: positive for every M > 1, exactly zero at M = 1
    P, coeffs = trivial_problem(g2, M=2.0)
    report = find_min_scale(P, coeffs)
    assert report.succeeded
    assert report.M_lo == 2.0
    assert report.M_fail == 1.0
    assert [a["M"] for a in report.attempts] == [2.0, 1.0]
    assert [a["ok"] for a in report.attempts] == [True, False]


def test_min_scale_generic_bracket(g2):
    rho = herm_waves(g2, 0.4, 1)
    P = ProblemSpec(n=2, k=1, gamma=2.0, alpha=0.3, rho=rho,
                    mu=zero_mu(g2), M=600.0, grid=g2)
    coeffs = extract_lrho(rho, g2)
    report = find_min_scale(P, coeffs, NewtonConfig(tol_residual=1e-9))
    assert report.succeeded
    assert report.M_lo is not None and report.M_lo >= 1.0
    assert report.M_fail == pytest.approx(report.M_lo / 2.0)
    # monotone: everything at or above M_lo that was tried succeeded
    for att in report.attempts:
        if att["M"] >= report.M_lo:
            assert att["ok"]


# ----------------------------------------------------------------------
# uniqueness probe
# ----------------------------------------------------------------------


def test_uniqueness_constant_path(triv2):
    P, coeffs = triv2
    report = uniqueness_probe(P, coeffs, perturbations=3, seed=1)
    assert report.runs == 4
    assert report.within_tolerance
    assert report.max_pairwise_distance <= 1e-7


def test_uniqueness_manufactured(man2):
    P, coeffs, _ = man2
    report = uniqueness_probe(P, coeffs, perturbations=2, seed=2)
    assert report.within_tolerance
    assert report.max_pairwise_distance <= 1e-7
    assert report.rejected_starts >= 0


# ----------------------------------------------------------------------
# derived tensors
# ----------------------------------------------------------------------


def test_third_derivative_orderings_agree(g2):
    # d_j H[p][q] - u_p H[j][q] versus d_p H[j][q] - u_p H[j][q]:
    # equal because spectral partials commute
    from fuyau.geometry import _fftn, _ifftn, complex_hessian, gradient_z

    u = ScalarField(g2, wave(g2, 0.3, seed=8, band=2, nmodes=6))
    T = third_derivative_tensor(u)
    H = complex_hessian(u)
    du = gradient_z(u)
    n = g2.n
    alt = np.empty_like(T)
    for j in range(n):
        for q in range(n):
            spec = _fftn(H.values[..., j, q])
            for p in range(n):
                alt[..., p, q, j] = _ifftn(spec * g2.dz_symbol(p, bar=False))
    alt -= np.einsum("...p,...jq->...pqj", du, H.values)
    scale = 1 + np.abs(T).max()
    assert np.abs(T - alt).max() <= 1e-10 * scale


def test_lemma2_sandwich_flat_start(triv2):
    P, coeffs = triv2
    u = ScalarField(P.grid, np.full(P.grid.shape, np.log(P.M)))
    ok, lmin, lmax = lemma2_sandwich(u, 0.0, P, coeffs)
    assert ok
    assert abs(lmin - 1) <= 1e-12
    assert abs(lmax - 1) <= 1e-12


def test_estimate_diagnostics_positive_and_finite(man2, man2_march):
    P, _, _ = man2
    u, _ = man2_march
    diag = estimate_diagnostics(u, P)
    for name in ("sup_eu_over_M", "M_over_inf_eu", "c1_diag", "c2_diag", "c3_diag"):
        val = getattr(diag, name)
        assert np.isfinite(val)
        assert val >= 0
    assert diag.sup_eu_over_M >= 1.0 - 1e-12
    assert diag.M_over_inf_eu >= 1.0 - 1e-12
