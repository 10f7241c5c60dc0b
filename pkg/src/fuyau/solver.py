"""Continuity-path solver: damped Newton inside the admissible set.

The path starts at t=0 where u = log M solves the equation exactly, and
marches t upward to 1 with adaptive steps.  Each step is corrected by a
damped Newton iteration whose linear solves go through a bordered system

    [ J        e^{u} ] [h]   [-residual]
    [ weight     0   ] [l] = [    0    ]

with the weight row enforcing integral(h e^{u}) = 0, i.e. steps tangent to
the normalization surface integral(e^u) = M.  The border removes the
near-null direction of J (constants in the flat limit) without ever
computing a kernel function; the multiplier l is exactly zero for
compatible right-hand sides because integral(J h) = 0 holds discretely
(the residual assembly de-aliases its top-order term), so constants span
the discrete cokernel exactly.

Admissibility along the path is monitored with the ellipticity-relevant
gate (the Hessian branch of delta; see AdmissibilityConstants.delta_ell)
while the margin against the full recipe delta is reported as a
diagnostic in every trace record.

The assembled residual and its linearization live in the Nyquist-free
trigonometric polynomials (the discrete test space), and the Krylov
vectors stay in that subspace because the right-hand side and every
operator application do.  Pure-Nyquist components of a warm start are
outside the test space: they ride along unchanged and are only seen by
the admissibility gates.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .geometry import (
    ScalarField,
    _fftn,
    _ifftn,
    complex_hessian,
    gradient_z,
    integrate,
    laplacian,
)
from .hessian import upsilon_margin
from .operator import (
    F_tensor,
    ProblemSpec,
    compute_constants,
    make_linearizer,
    residual,
)


# ----------------------------------------------------------------------
# errors
# ----------------------------------------------------------------------


class SolverError(Exception):
    """Base class for solver failures."""


class MaxItersExceeded(SolverError):
    pass


class LeftAdmissibleSet(SolverError):
    def __init__(self, message, margins=None):
        super().__init__(message)
        self.margins = margins


class KrylovStall(SolverError):
    pass


class StepFloorReached(SolverError):
    def __init__(self, message, last_good_t=None, margins=None):
        super().__init__(message)
        self.last_good_t = last_good_t
        self.margins = margins


class NonUniqueCandidate(SolverError):
    pass


# ----------------------------------------------------------------------
# configuration and reports
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class NewtonConfig:
    tol_residual: float = 1e-10
    max_iters: int = 30
    damping: float = 0.5
    max_halvings: int = 8
    krylov_tol: float = 1e-12
    krylov_max: int = 500

    def __post_init__(self):
        for name in ("tol_residual", "max_iters", "max_halvings",
                     "krylov_tol", "krylov_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.damping < 1.0:
            raise ValueError("damping must lie in (0, 1)")


@dataclass(frozen=True)
class EstimateDiagnostics:
    """The three scale-estimate quantities plus the two-sided bound on e^u.

    All are norms or ratios, hence finite and nonnegative at accepted
    steps (zero on the path of constants).
    """

    sup_eu_over_M: float
    M_over_inf_eu: float
    c1_diag: float
    c2_diag: float
    c3_diag: float


@dataclass(frozen=True)
class NewtonReport:
    iterations: int
    final_residual: float
    krylov_iterations: int
    halvings: int


@dataclass
class ContinuationTrace:
    steps: list = field(default_factory=list)

    @property
    def accepted_steps(self):
        return [s for s in self.steps if s["step_accepted"]]

    def dump_jsonl(self, fileobj):
        for step in self.steps:
            fileobj.write(json.dumps(step, sort_keys=True) + "\n")


@dataclass(frozen=True)
class MinScaleReport:
    M_lo: float | None
    M_fail: float | None
    succeeded: bool
    attempts: list


@dataclass(frozen=True)
class UniquenessReport:
    runs: int
    rejected_starts: int
    max_pairwise_distance: float
    within_tolerance: bool


# ----------------------------------------------------------------------
# small field utilities
# ----------------------------------------------------------------------


def renormalize(u: ScalarField, M: float) -> ScalarField:
    """Shift u by a constant so that integral(e^u) = M exactly."""
    mass = integrate(ScalarField(u.grid, np.exp(u.values)))
    return ScalarField(u.grid, u.values + np.log(M / mass))


def admissible_margins(u: ScalarField, P, K) -> tuple:
    """Operational gate margins (m1 with delta_ell, m2 with tau)."""
    H = complex_hessian(u)
    K_ell = dataclasses.replace(K, delta=K.delta_ell)
    return upsilon_margin(u, H, P, K_ell)


def spec_delta_margin(u: ScalarField, P, K) -> float:
    """Margin against the full recipe delta (diagnostic only; tiny at
    desk scale because of the C_X-driven branch)."""
    return float(K.delta - np.exp(-P.gamma * u.values).max())


def third_derivative_tensor(u: ScalarField, H=None) -> np.ndarray:
    """Covariant third derivative for the conformal metric e^u ghat.

    Returns T with T[..., p, q, j] = the (p, qbar, j)-component.  On this
    flat background the connection of e^u ghat has coefficients
    u_k delta^j_p, so the tensor reduces to d_j H[p][q] - u_p H[j][q];
    the alternative route d_p H[j][q] - u_p H[j][q] agrees because
    spectral partials commute.
    """
    grid = u.grid
    n = grid.n
    if H is None:
        H = complex_hessian(u)
    du = gradient_z(u)
    T = np.empty(grid.shape + (n, n, n), dtype=complex)
    for p in range(n):
        for q in range(n):
            spec = _fftn(H.values[..., p, q])
            for j in range(n):
                T[..., p, q, j] = _ifftn(spec * grid.dz_symbol(j, bar=False))
    T -= np.einsum("...p,...jq->...pqj", du, H.values)
    return T


def estimate_diagnostics(u: ScalarField, P) -> EstimateDiagnostics:
    grid = u.grid
    s = grid.scale_s
    eu = np.exp(u.values)
    du = gradient_z(u)
    c1 = float(((np.abs(du) ** 2).sum(-1) / s).max())
    H = complex_hessian(u)
    hnorm = np.sqrt((np.abs(H.values) ** 2).sum((-2, -1))) / s
    c2 = float(np.sqrt(P.M) * (hnorm / eu).max())
    T = third_derivative_tensor(u, H)
    tnorm2 = (np.abs(T) ** 2).sum((-3, -2, -1)) / s**3
    c3 = float((tnorm2 / eu**3).max())
    return EstimateDiagnostics(
        sup_eu_over_M=float(eu.max() / P.M),
        M_over_inf_eu=float(P.M / eu.min()),
        c1_diag=c1,
        c2_diag=c2,
        c3_diag=c3,
    )


def lemma2_sandwich(u: ScalarField, t: float, P, coeffs) -> tuple:
    """Eigenvalue range of F against the conformal metric.

    Returns (ok, lam_min, lam_max); ok means the whole field sits inside
    [1 - 2^-6, 1 + 2^-6] (up to an eigensolver-rounding hair).
    """
    F = F_tensor(u, t, P, coeffs).values
    scale = (P.grid.scale_s * np.exp(u.values))[..., None, None]
    lam = np.linalg.eigvalsh(scale * F)
    lmin = float(lam.min())
    lmax = float(lam.max())
    pad = 1e-12
    ok = (lmin >= 1 - 2.0**-6 - pad) and (lmax <= 1 + 2.0**-6 + pad)
    return ok, lmin, lmax


# ----------------------------------------------------------------------
# bordered Krylov solve
# ----------------------------------------------------------------------


def _model_symbol(grid, scale):
    """Spectrum of scale * laplacian, with live (non-filtered) values at
    the Nyquist bins so the model stays invertible there; the zero bin is
    handled by the border."""
    mode2 = np.zeros(grid.shape)
    modes = np.fft.fftfreq(grid.N, d=1.0 / grid.N)
    for ax in range(2 * grid.n):
        shape = [1] * (2 * grid.n)
        shape[ax] = grid.N
        mode2 = mode2 + modes.reshape(shape) ** 2
    sym = -(np.pi**2 / grid.scale_s) * mode2 * scale
    sym.flat[0] = 1.0  # placeholder; the zero mode is projected out
    return sym


def _krylov_bordered(L_apply, u0: ScalarField, rhs: ScalarField, cfg, k=1):
    """Solve the bordered system; returns (h, multiplier, iterations)."""
    grid = u0.grid
    w = np.exp(u0.values)
    Ebar1 = float(w.mean())
    Ek = float(np.exp(k * u0.values).mean())
    G = w.size
    shape = grid.shape

    rhs_sup = float(np.abs(rhs.values).max())
    if abs(integrate(rhs)) > 1e-10 * (1.0 + rhs_sup):
        raise ValueError(
            "right-hand side violates the compatibility condition "
            "integral(rhs) = 0"
        )

    sym = _model_symbol(grid, Ek)

    def matvec(x):
        h = x[:G].reshape(shape)
        lam = x[G]
        y = L_apply(ScalarField(grid, h)).values + lam * w
        z = float(np.mean(h * w))
        return np.concatenate([y.ravel(), [z]])

    def psolve(x):
        y = x[:G].reshape(shape)
        z = x[G]
        ybar = y.mean()
        spec = _fftn(y.astype(complex))
        spec.flat[0] = 0.0
        h = _ifftn(spec / sym).real + z / Ebar1
        return np.concatenate([h.ravel(), [ybar / Ebar1]])

    op = LinearOperator((G + 1, G + 1), matvec=matvec, dtype=float)
    pre = LinearOperator((G + 1, G + 1), matvec=psolve, dtype=float)
    b = np.concatenate([rhs.values.ravel(), [0.0]])

    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    restart = min(50, cfg.krylov_max)
    cycles = max(1, cfg.krylov_max // restart)
    scale = 1.0 + rhs_sup

    rtol = max(cfg.krylov_tol / 10.0, 1e-14)
    for attempt in range(2):
        x, info = gmres(
            op, b, rtol=rtol, atol=0.0, restart=restart, maxiter=cycles,
            M=pre, callback=count, callback_type="pr_norm",
        )
        h = ScalarField(grid, x[:G].reshape(shape))
        lam = float(x[G])
        gap = L_apply(h).values + lam * w - rhs.values
        ok_op = float(np.abs(gap).max()) <= cfg.krylov_tol * scale
        ok_mult = abs(lam) * float(w.max()) <= cfg.krylov_tol * scale
        constraint = abs(float(np.mean(h.values * w)))
        ok_con = constraint <= 1e-12 * (1.0 + float(np.abs(h.values).max()) * float(w.max()))
        # the reapplication check is authoritative; gmres's own flag can
        # report stagnation after the verified tolerance is already met
        if ok_op and ok_mult and ok_con:
            return h, lam, iters
        rtol = 1e-14  # one tightening retry, then give up

    raise KrylovStall(
        f"no Krylov convergence within {cfg.krylov_max} iterations "
        f"(info={info}, operator gap {float(np.abs(gap).max()):.3e}, "
        f"constraint {constraint:.3e})"
    )


def krylov_bordered(L_apply, u0: ScalarField, rhs: ScalarField,
                    cfg: NewtonConfig | None = None, k: int = 1) -> ScalarField:
    """Public wrapper: solve the bordered system and return the field h.

    L_apply must be the full linearized residual (the directional
    derivative of residual(), i.e. n times the density of the linearized
    operator); k is the exponent of the conformal weight in the principal
    part and feeds the preconditioner model mean(e^{k u0}) * laplacian.
    """
    cfg = cfg or NewtonConfig()
    h, _, _ = _krylov_bordered(L_apply, u0, rhs, cfg, k=k)
    return h


# ----------------------------------------------------------------------
# Newton
# ----------------------------------------------------------------------


def _residual_floor(u: ScalarField, t: float, P) -> float:
    """Rounding-floor estimate for one residual evaluation.

    The dominant roundoff amplification is the spectral Laplacian of
    e^{ku}: machine epsilon times the largest Laplacian symbol on the
    grid times sup e^{ku}.  The forcing contributes at its own sup and
    the Hessian-wedge term at the measured size of the Laplacian of u
    raised to its multilinearity; inside the admissible set both sit
    orders below the first term, but they are included so the estimate
    does not silently under-report on extreme inputs.  A sup-residual
    tolerance below this value is unsatisfiable in floating point, so
    the Newton loop treats max(tolerance, floor) as its target.
    """
    grid = u.grid
    uv = np.real(u.values)
    k = P.k
    lam = sum(
        float(np.max(np.abs(grid._deriv_symbol(ax))) ** 2)
        for ax in range(2 * grid.n)
    )
    s_lap = lam * float(np.max(np.exp(k * uv))) / k
    s_mu = abs(t) * float(np.max(np.abs(P.mu.values)))
    s_hess = float(np.max(np.abs(laplacian(u).values)))
    s_sigma = comb(grid.n, k + 1) * s_hess ** (k + 1)
    eps = float(np.finfo(float).eps)
    return 4.0 * eps * (s_lap + s_mu + s_sigma + 1.0)


def newton_solve(u_init: ScalarField, t: float, P: ProblemSpec, coeffs,
                 cfg: NewtonConfig | None = None, constants=None):
    """Damped Newton at fixed t with the integral(e^u) = M normalization.

    Returns (u, NewtonReport).  The merit function for backtracking is
    the residual sup-norm; every candidate is renormalized exactly and
    must keep positive admissibility margins.  The convergence target is
    the configured tolerance or the evaluation's rounding floor,
    whichever is larger — an absolute tolerance below the floor would
    spin the iteration against roundoff it can never beat.
    """
    cfg = cfg or NewtonConfig()
    K = constants if constants is not None else compute_constants(P, coeffs)
    grid = P.grid
    n = grid.n

    u = renormalize(u_init, P.M)
    m1, m2 = admissible_margins(u, P, K)
    if m1 <= 0 or m2 <= 0:
        raise LeftAdmissibleSet(
            f"starting point is outside the admissible set "
            f"(m1={m1:.3e}, m2={m2:.3e})",
            margins=(m1, m2),
        )

    krylov_total = 0
    halvings_total = 0
    res = residual(u, t, P, coeffs)
    rnorm = float(np.abs(res.values).max())
    target = max(cfg.tol_residual, _residual_floor(u, t, P))

    for iteration in range(cfg.max_iters + 1):
        if rnorm <= target:
            return u, NewtonReport(iteration, rnorm, krylov_total, halvings_total)
        if iteration == cfg.max_iters:
            break

        lin = make_linearizer(u, t, P, coeffs)

        def J_apply(hh, _lin=lin):
            return ScalarField(grid, n * _lin(hh).values)

        rhs = ScalarField(grid, -res.values)
        h, _, kit = _krylov_bordered(J_apply, u, rhs, cfg, k=P.k)
        krylov_total += kit

        beta = 1.0
        accepted = False
        saw_admissible = False
        for _ in range(cfg.max_halvings + 1):
            u_try = renormalize(
                ScalarField(grid, u.values + beta * h.values), P.M
            )
            mm = admissible_margins(u_try, P, K)
            if mm[0] > 0 and mm[1] > 0:
                saw_admissible = True
                res_try = residual(u_try, t, P, coeffs)
                r_try = float(np.abs(res_try.values).max())
                if r_try < rnorm:
                    u, res, rnorm = u_try, res_try, r_try
                    accepted = True
                    break
            beta *= cfg.damping
            halvings_total += 1

        if not accepted:
            if not saw_admissible:
                raise LeftAdmissibleSet(
                    f"every damped Newton candidate at t={t:.6f} left the "
                    f"admissible set (step too large)"
                )
            raise MaxItersExceeded(
                f"backtracking could not reduce the residual at t={t:.6f} "
                f"(stuck at {rnorm:.3e})"
            )

    raise MaxItersExceeded(
        f"no convergence in {cfg.max_iters} Newton iterations at t={t:.6f} "
        f"(residual {rnorm:.3e}, tolerance {cfg.tol_residual:.1e})"
    )


# ----------------------------------------------------------------------
# the continuity march
# ----------------------------------------------------------------------


def _step_record(t, dt, accepted, rep=None, margins=None, m1_spec=None,
                 diag=None, lemma2=None, reason=None):
    rec = {
        "t": float(t),
        "dt": float(dt),
        "step_accepted": bool(accepted),
        "newton_iters": None if rep is None else rep.iterations,
        "final_residual": None if rep is None else rep.final_residual,
        "krylov_iterations": None if rep is None else rep.krylov_iterations,
        "halvings": None if rep is None else rep.halvings,
        "upsilon_margins": None if margins is None else [float(margins[0]), float(margins[1])],
        "m1_spec_delta": None if m1_spec is None else float(m1_spec),
        "estimate_diagnostics": None if diag is None else dataclasses.asdict(diag),
        "lemma2_ok": None if lemma2 is None else lemma2[0],
        "lemma2_min": None if lemma2 is None else lemma2[1],
        "lemma2_max": None if lemma2 is None else lemma2[2],
        "reason": reason,
    }
    return rec


def continuity_march(P: ProblemSpec, coeffs, cfg: NewtonConfig | None = None,
                     constants=None, checkpoint_cb=None, _warm_hook=None):
    """March t from 0 to 1; returns (u_final, ContinuationTrace).

    Steps: dt starts at 0.1, doubles after success (capped at 0.25),
    halves after a failed Newton attempt, and aborts with
    StepFloorReached below 1e-3.  Every accepted step is audited:
    positive gate margins, the two-sided eigenvalue sandwich on F, exact
    normalization, and the full diagnostic block go into the trace.
    """
    cfg = cfg or NewtonConfig()
    K = constants if constants is not None else compute_constants(P, coeffs)
    grid = P.grid
    trace = ContinuationTrace()

    u = ScalarField(grid, np.full(grid.shape, np.log(P.M)))
    m = admissible_margins(u, P, K)
    if m[0] <= 0 or m[1] <= 0:
        raise StepFloorReached(
            f"the flat start log M is outside the admissible set "
            f"(m1={m[0]:.3e}, m2={m[1]:.3e}); M is too small",
            last_good_t=None,
            margins=m,
        )

    def audit(t_val, dt_val, u_acc, rep):
        # one trace record per Newton success; acceptance additionally
        # requires the two-sided eigenvalue sandwich on F
        margins = admissible_margins(u_acc, P, K)
        lem = lemma2_sandwich(u_acc, t_val, P, coeffs)
        rec = _step_record(
            t_val, dt_val, lem[0], rep=rep, margins=margins,
            m1_spec=spec_delta_margin(u_acc, P, K),
            diag=estimate_diagnostics(u_acc, P), lemma2=lem,
            reason=None if lem[0] else "ellipticity sandwich violated",
        )
        trace.steps.append(rec)
        return lem[0]

    u, rep = newton_solve(u, 0.0, P, coeffs, cfg, K)
    if not audit(0.0, 0.0, u, rep):
        raise StepFloorReached(
            "ellipticity sandwich violated already at t=0",
            last_good_t=None, margins=m,
        )
    if checkpoint_cb is not None:
        checkpoint_cb(0.0, u)

    t = 0.0
    dt = 0.1
    while t < 1.0:
        t_try = min(t + dt, 1.0)
        if 1.0 - t_try < 1e-12:
            t_try = 1.0
        warm = u
        if _warm_hook is not None:
            warm = _warm_hook(u, t_try)
        try:
            u_new, rep = newton_solve(warm, t_try, P, coeffs, cfg, K)
        except (MaxItersExceeded, LeftAdmissibleSet, KrylovStall) as exc:
            trace.steps.append(
                _step_record(t_try, dt, False, reason=f"{type(exc).__name__}: {exc}")
            )
            dt *= 0.5
            if dt < 1e-3:
                margins = getattr(exc, "margins", None)
                raise StepFloorReached(
                    f"step size fell below 1e-3 at t={t:.6f} "
                    f"(last failure: {type(exc).__name__})",
                    last_good_t=t,
                    margins=margins,
                ) from exc
            continue

        if not audit(t_try, dt, u_new, rep):
            dt *= 0.5
            if dt < 1e-3:
                raise StepFloorReached(
                    f"step size fell below 1e-3 at t={t:.6f} "
                    f"(ellipticity sandwich kept failing)",
                    last_good_t=t,
                )
            continue

        u = u_new
        t = t_try
        if checkpoint_cb is not None:
            checkpoint_cb(t, u)
        dt = min(dt * 2.0, 0.25)

    return u, trace


# ----------------------------------------------------------------------
# scale search and uniqueness probe
# ----------------------------------------------------------------------


def find_min_scale(P: ProblemSpec, coeffs, cfg: NewtonConfig | None = None,
                   max_doublings: int = 16) -> MinScaleReport:
    """Bracket the smallest normalization scale the march tolerates.

    Halves M while the march keeps succeeding (never below the domain
    floor M = 1), or doubles until the first success; adjacent powers of
    two give a bracket of width exactly 2.  The per-problem coefficient
    extraction is reused because it does not depend on M.
    """
    cfg = cfg or NewtonConfig()
    attempts = []

    def try_M(M):
        Pm = dataclasses.replace(P, M=float(M))
        try:
            continuity_march(Pm, coeffs, cfg)
        except SolverError as exc:
            attempts.append({"M": float(M), "ok": False,
                             "reason": type(exc).__name__})
            return False
        attempts.append({"M": float(M), "ok": True, "reason": ""})
        return True

    M0 = max(float(P.M), 2.0)
    if try_M(M0):
        M_ok = M0
        while M_ok / 2.0 >= 1.0 and try_M(M_ok / 2.0):
            M_ok /= 2.0
        M_fail = M_ok / 2.0 if M_ok / 2.0 >= 1.0 else None
        return MinScaleReport(M_lo=M_ok, M_fail=M_fail, succeeded=True,
                              attempts=attempts)

    M_bad = M0
    for _ in range(max_doublings):
        M_try = M_bad * 2.0
        if try_M(M_try):
            return MinScaleReport(M_lo=M_try, M_fail=M_bad, succeeded=True,
                                  attempts=attempts)
        M_bad = M_try
    return MinScaleReport(M_lo=None, M_fail=M_bad, succeeded=False,
                          attempts=attempts)


def _random_band_kick(grid, amp, rng, band=1, nmodes=4):
    vals = np.zeros(grid.shape)
    d = 2 * grid.n
    for _ in range(nmodes):
        m = rng.integers(-band, band + 1, size=d)
        if not m.any():
            continue
        phase = np.zeros(grid.shape)
        for ax in range(d):
            if m[ax]:
                phase = phase + 2 * np.pi * m[ax] * grid.axis_coordinate(ax)
        vals = vals + rng.normal() * np.cos(phase + rng.uniform(0, 2 * np.pi))
    peak = max(np.abs(vals).max(), 1e-300)
    return vals * (amp / peak)


def uniqueness_probe(P: ProblemSpec, coeffs, cfg: NewtonConfig | None = None,
                     perturbations: int = 5, seed: int = 0,
                     perturb_amp: float = 1e-4) -> UniquenessReport:
    """Empirical uniqueness check: rerun the march with randomly kicked
    warm starts and compare the endpoints.

    Kicks that would leave the admissible set are rejected at the
    precondition and counted separately (the unperturbed warm start is
    used for that restart).  Raises NonUniqueCandidate if two endpoints
    differ by more than 1e-5 in sup-norm.
    """
    cfg = cfg or NewtonConfig()
    K = compute_constants(P, coeffs)
    base_u, _ = continuity_march(P, coeffs, cfg, K)

    rng = np.random.default_rng(seed)
    rejected = 0
    finals = [base_u]
    for _ in range(perturbations):

        def hook(u, t_next):
            nonlocal rejected
            amp = perturb_amp * (1.0 + float(np.abs(u.values).max()))
            kick = _random_band_kick(u.grid, amp, rng)
            u_p = renormalize(ScalarField(u.grid, u.values + kick), P.M)
            mm = admissible_margins(u_p, P, K)
            if mm[0] <= 0 or mm[1] <= 0:
                rejected += 1
                return u
            return u_p

        u_run, _ = continuity_march(P, coeffs, cfg, K, _warm_hook=hook)
        finals.append(u_run)

    dmax = 0.0
    for i in range(len(finals)):
        for j in range(i + 1, len(finals)):
            d = float(np.abs(finals[i].values - finals[j].values).max())
            dmax = max(dmax, d)

    if dmax > 1e-5:
        raise NonUniqueCandidate(
            f"two continuation runs ended {dmax:.3e} apart (threshold 1e-5)"
        )
    return UniquenessReport(
        runs=len(finals),
        rejected_starts=rejected,
        max_pairwise_distance=dmax,
        within_tolerance=dmax <= 1e-7,
    )
