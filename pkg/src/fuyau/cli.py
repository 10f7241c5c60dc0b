"""Batch front-end: parse a problem config, run one mode, emit artifacts.

Modes
-----
solve         march the configured problem to t=1, write the solution
manufactured  synthesize the forcing for a chosen profile, march, and
              report the recovery error
sweep         re-solve one family across a list of normalizations M and
              tabulate the scale-compensated diagnostics
verify-all    manufactured round trip plus the full battery of identity
              checks, randomized invariants, and negative controls
min-scale     bracket the smallest M the march tolerates

Config files are TOML.  rho and mu are given as Fourier series (exactly
Hermitian / exactly real by construction) or as snapshot paths; relative
snapshot paths resolve against the config file's directory.

    mode = "solve"            # optional; must match the CLI mode if set
    seed = 7                  # optional, default 0
    output_dir = "out"        # optional, default "fuyau-out"

    [grid]
    n = 2
    N = 8

    [problem]
    k = 1
    gamma = 2.0
    alpha = 0.3
    M = 64.0

    [[problem.rho.terms]]     # rho += A e^{2pi i m.x} + A^H e^{-2pi i m.x}
    m = [1, 0, 0, 0]
    A = [[[0.02, 0.0], [0.0, 0.01]], [[0.0, -0.01], [0.015, 0.0]]]

    [[problem.mu.terms]]      # mu += c e^{2pi i m.x} + conj(...)
    m = [0, 1, 0, 0]
    c = [0.5, 0.0]

    [newton]                  # optional NewtonConfig overrides
    tol_residual = 1e-10

    [manufactured]            # for manufactured / verify-all modes
    recovery_tol = 1e-7
    [[manufactured.profile.terms]]
    m = [1, 0, 0, 0]
    c = [0.02, 0.0]

    [sweep]                   # for sweep mode
    Ms = [64.0, 128.0, 256.0, 512.0]
    factor = 4.0
    [[sweep.perturbation.terms]]
    m = [1, 0, 0, 0]
    c = [0.02, 0.0]

Exit codes: 0 all contracted invariants passed; 2 config error; 3 solver
failure (summary carries the last good homotopy time and the violated
margin); 4 invariant violation.

The mean-zero hypothesis on mu is checked, not repaired: a forcing with
nonzero mean is a config error unless --allow-mu-projection is given, in
which case the mean is removed, the repair is logged loudly on stderr,
and the summary records what was removed.

Outputs are deterministic for a fixed config and seed: JSON is written
with sorted keys and no timestamps, and the trace JSONL carries only
solver quantities.  The single exception is the wall_ms column of the
diagnostics CSV, which is honest wall-clock timing.  FUYAU_THREADS caps
the sweep fan-out (default 1; rows are assembled in M order regardless).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

import numpy as np

from .geometry import (
    HermitianField,
    ScalarField,
    TorusGrid,
    build_grid,
    integrate,
    read_snapshot,
    write_snapshot,
)
from .hessian import lemma1_bound
from .operator import ProblemSpec, compute_constants, extract_lrho, residual
from .solver import (
    NewtonConfig,
    NonUniqueCandidate,
    SolverError,
    admissible_margins,
    continuity_march,
    estimate_diagnostics,
    find_min_scale,
    uniqueness_probe,
)
from .verify import (
    ibp_identity,
    manufacture,
    scale_sweep,
    sigma2_rewrite_check,
    sigma_second_variation_check,
    stokes_invariant,
    sweep_summary,
    torsion_curvature_check,
    write_sweep_csv,
)

MODES = ("solve", "manufactured", "sweep", "verify-all", "min-scale")


class ConfigError(Exception):
    """Invalid config document; the message is anchored to the offending
    key by its dotted path."""


# ----------------------------------------------------------------------
# config loading
# ----------------------------------------------------------------------


@dataclass
class RunConfig:
    mode: str
    P: ProblemSpec
    newton: NewtonConfig
    output_dir: str
    seed: int
    threads: int
    profile: ScalarField | None = None
    recovery_tol: float = 1e-7
    sweep_Ms: list | None = None
    sweep_factor: float = 4.0
    sweep_perturbation: ScalarField | None = None
    mu_projected: bool = False
    mu_mean_removed: float = 0.0


def _req(tbl: dict, key: str, path: str):
    if key not in tbl:
        raise ConfigError(f"{path}.{key}: required key missing")
    return tbl[key]


def _num(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def _mode_vector(term: dict, d: int, path: str) -> list:
    m = _req(term, "m", path)
    if not isinstance(m, list) or len(m) != d:
        raise ConfigError(f"{path}.m: expected a list of {d} integers")
    return [_int(x, f"{path}.m") for x in m]


def _phase(grid: TorusGrid, m: list) -> np.ndarray:
    phase = np.zeros(grid.shape)
    for ax, mx in enumerate(m):
        if mx:
            phase = phase + (2 * np.pi * mx) * grid.axis_coordinate(ax)
    return phase


def _complex_pair(value, path: str) -> complex:
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError(f"{path}: expected [re, im]")
    return complex(_num(value[0], path), _num(value[1], path))


def _scalar_series(grid: TorusGrid, terms: list, path: str) -> np.ndarray:
    """Sum of c e^{2pi i m.x} + conj — real by construction."""
    vals = np.zeros(grid.shape)
    d = 2 * grid.n
    for i, term in enumerate(terms):
        tpath = f"{path}[{i}]"
        if not isinstance(term, dict):
            raise ConfigError(f"{tpath}: expected a table")
        m = _mode_vector(term, d, tpath)
        c = _complex_pair(_req(term, "c", tpath), f"{tpath}.c")
        ph = _phase(grid, m)
        vals = vals + 2.0 * (c.real * np.cos(ph) - c.imag * np.sin(ph))
    return vals


def _matrix_series(grid: TorusGrid, terms: list, path: str) -> HermitianField:
    """Sum of A e^{2pi i m.x} + A^H e^{-2pi i m.x} — Hermitian by construction."""
    n = grid.n
    vals = np.zeros(grid.shape + (n, n), dtype=complex)
    d = 2 * n
    for i, term in enumerate(terms):
        tpath = f"{path}[{i}]"
        if not isinstance(term, dict):
            raise ConfigError(f"{tpath}: expected a table")
        m = _mode_vector(term, d, tpath)
        rows = _req(term, "A", tpath)
        if not isinstance(rows, list) or len(rows) != n:
            raise ConfigError(f"{tpath}.A: expected {n} rows")
        A = np.empty((n, n), dtype=complex)
        for p in range(n):
            if not isinstance(rows[p], list) or len(rows[p]) != n:
                raise ConfigError(f"{tpath}.A[{p}]: expected {n} entries")
            for q in range(n):
                A[p, q] = _complex_pair(rows[p][q], f"{tpath}.A[{p}][{q}]")
        blob = np.exp(1j * _phase(grid, m))[..., None, None] * A
        vals = vals + blob + np.conj(np.swapaxes(blob, -1, -2))
    return HermitianField(grid, vals)


def _load_field(grid: TorusGrid, tbl, path: str, kind: str, base_dir: str):
    """A field source: {terms = [...]} or {snapshot = "file.fyh"}."""
    if tbl is None:
        if kind == "rho":
            n = grid.n
            return HermitianField(grid, np.zeros(grid.shape + (n, n), complex))
        return ScalarField(grid, np.zeros(grid.shape))
    if not isinstance(tbl, dict):
        raise ConfigError(f"{path}: expected a table")
    has_terms = "terms" in tbl
    has_snap = "snapshot" in tbl
    if has_terms == has_snap:
        raise ConfigError(f"{path}: give exactly one of 'terms' or 'snapshot'")
    if has_snap:
        fp = tbl["snapshot"]
        if not isinstance(fp, str):
            raise ConfigError(f"{path}.snapshot: expected a path string")
        full = fp if os.path.isabs(fp) else os.path.join(base_dir, fp)
        try:
            fld = read_snapshot(full, grid)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}.snapshot: {exc}") from exc
        want = HermitianField if kind == "rho" else ScalarField
        if not isinstance(fld, want):
            raise ConfigError(
                f"{path}.snapshot: holds a {type(fld).__name__}, "
                f"need a {want.__name__}"
            )
        if kind != "rho" and np.iscomplexobj(fld.values):
            if np.max(np.abs(fld.values.imag)) > 1e-12:
                raise ConfigError(f"{path}.snapshot: field must be real")
            fld = ScalarField(grid, np.real(fld.values))
        return fld
    terms = tbl["terms"]
    if not isinstance(terms, list) or not terms:
        raise ConfigError(f"{path}.terms: expected a non-empty list of tables")
    if kind == "rho":
        return _matrix_series(grid, terms, f"{path}.terms")
    return ScalarField(grid, _scalar_series(grid, terms, f"{path}.terms"))


_NEWTON_KEYS = ("tol_residual", "max_iters", "damping", "max_halvings",
                "krylov_tol", "krylov_max")


def _load_newton(tbl, path: str) -> NewtonConfig:
    if tbl is None:
        return NewtonConfig()
    if not isinstance(tbl, dict):
        raise ConfigError(f"{path}: expected a table")
    kwargs = {}
    for key, value in tbl.items():
        if key not in _NEWTON_KEYS:
            raise ConfigError(f"{path}.{key}: unknown key "
                              f"(known: {', '.join(_NEWTON_KEYS)})")
        if key in ("max_iters", "max_halvings", "krylov_max"):
            kwargs[key] = _int(value, f"{path}.{key}")
        else:
            kwargs[key] = _num(value, f"{path}.{key}")
    return NewtonConfig(**kwargs)


def _threads_from_env() -> int:
    raw = os.environ.get("FUYAU_THREADS", "")
    if not raw:
        return 1
    try:
        t = int(raw)
    except ValueError:
        raise ConfigError(f"FUYAU_THREADS: expected a positive integer, "
                          f"got {raw!r}")
    if t < 1:
        raise ConfigError(f"FUYAU_THREADS: expected a positive integer, got {t}")
    return t


def validate_config(raw: dict, mode: str, *, base_dir: str = ".",
                    allow_mu_projection: bool = False,
                    grid_n: int | None = None, grid_N: int | None = None,
                    seed: int | None = None,
                    out: str | None = None) -> RunConfig:
    """Check every constraint up front and assemble the run plan.

    Hypotheses of the equation (k range, gamma sign, nonzero slope,
    mean-zero forcing) are validated here as named errors — they are
    mathematical content, not formatting.  CLI overrides (grid, seed,
    output dir) are applied before any field is assembled.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected a table")
    if mode not in MODES:
        raise ConfigError(f"mode: unknown mode {mode!r}")
    cfg_mode = raw.get("mode")
    if cfg_mode is not None and cfg_mode != mode:
        raise ConfigError(
            f"mode: config says {cfg_mode!r} but the command line says "
            f"{mode!r}; refusing to guess"
        )

    gtbl = raw.get("grid")
    if gtbl is None and (grid_n is None or grid_N is None):
        raise ConfigError("grid: required table missing")
    gtbl = gtbl or {}
    n = grid_n if grid_n is not None else _int(_req(gtbl, "n", "grid"), "grid.n")
    N = grid_N if grid_N is not None else _int(_req(gtbl, "N", "grid"), "grid.N")
    try:
        grid = build_grid(n, N)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc

    ptbl = _req(raw, "problem", "config")
    if not isinstance(ptbl, dict):
        raise ConfigError("problem: expected a table")
    k = _int(_req(ptbl, "k", "problem"), "problem.k")
    gamma = _num(_req(ptbl, "gamma", "problem"), "problem.gamma")
    alpha = _num(_req(ptbl, "alpha", "problem"), "problem.alpha")
    M = _num(_req(ptbl, "M", "problem"), "problem.M")
    if not 1 <= k <= n - 1:
        raise ConfigError(f"problem.k: need 1 <= k <= n-1 = {n - 1}, got {k}")
    if gamma <= 0:
        raise ConfigError(f"problem.gamma: need gamma > 0, got {gamma}")
    if alpha == 0:
        raise ConfigError("problem.alpha: the slope must be nonzero")
    if M < 1:
        raise ConfigError(f"problem.M: need M >= 1, got {M}")

    rho = _load_field(grid, ptbl.get("rho"), "problem.rho", "rho", base_dir)
    mu = _load_field(grid, ptbl.get("mu"), "problem.mu", "mu", base_dir)

    mu_projected = False
    mu_mean = float(integrate(mu))
    if abs(mu_mean) > 1e-12 * (1.0 + float(np.max(np.abs(mu.values)))):
        if not allow_mu_projection:
            raise ConfigError(
                f"problem.mu: mean is {mu_mean:.6e}, not zero; the equation "
                "has no solution for such forcing.  Fix the data, or pass "
                "--allow-mu-projection to remove the mean explicitly."
            )
        print(
            f"WARNING: removing mu mean {mu_mean:.6e} (--allow-mu-projection); "
            "the mean-zero hypothesis was violated by the input",
            file=sys.stderr,
        )
        mu = ScalarField(grid, mu.values - mu_mean)
        mu_projected = True

    try:
        P = ProblemSpec(n=n, k=k, gamma=gamma, alpha=alpha, rho=rho, mu=mu,
                        M=M, grid=grid)
    except ValueError as exc:
        raise ConfigError(f"problem: {exc}") from exc

    newton = _load_newton(raw.get("newton"), "newton")

    if seed is None:
        seed = raw.get("seed", 0)
        seed = _int(seed, "seed")
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed: need 0 <= seed < 2^64, got {seed}")

    output_dir = out if out is not None else raw.get("output_dir", "fuyau-out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir: expected a non-empty path string")

    rc = RunConfig(mode=mode, P=P, newton=newton, output_dir=output_dir,
                   seed=seed, threads=_threads_from_env(),
                   mu_projected=mu_projected,
                   mu_mean_removed=mu_mean if mu_projected else 0.0)

    if mode in ("manufactured", "verify-all"):
        mtbl = raw.get("manufactured")
        if not isinstance(mtbl, dict):
            raise ConfigError(f"manufactured: required table missing for "
                              f"mode {mode}")
        prof = mtbl.get("profile")
        if not isinstance(prof, dict) or not isinstance(prof.get("terms"), list):
            raise ConfigError("manufactured.profile.terms: required list "
                              "of Fourier terms")
        w = _scalar_series(grid, prof["terms"], "manufactured.profile.terms")
        rc.profile = ScalarField(grid, w)
        if "recovery_tol" in mtbl:
            rc.recovery_tol = _num(mtbl["recovery_tol"],
                                   "manufactured.recovery_tol")
            if rc.recovery_tol <= 0:
                raise ConfigError("manufactured.recovery_tol: must be positive")

    if mode == "sweep":
        stbl = raw.get("sweep")
        if not isinstance(stbl, dict):
            raise ConfigError("sweep: required table missing for mode sweep")
        Ms = _req(stbl, "Ms", "sweep")
        if not isinstance(Ms, list) or not Ms:
            raise ConfigError("sweep.Ms: expected a non-empty list of scales")
        rc.sweep_Ms = [_num(x, "sweep.Ms") for x in Ms]
        if any(x < 1 for x in rc.sweep_Ms):
            raise ConfigError("sweep.Ms: scales must be >= 1")
        if "factor" in stbl:
            rc.sweep_factor = _num(stbl["factor"], "sweep.factor")
            if rc.sweep_factor <= 1:
                raise ConfigError("sweep.factor: must exceed 1")
        pert = stbl.get("perturbation")
        if pert is not None:
            if not isinstance(pert, dict) or not isinstance(
                    pert.get("terms"), list):
                raise ConfigError("sweep.perturbation.terms: required list "
                                  "of Fourier terms")
            w = _scalar_series(grid, pert["terms"], "sweep.perturbation.terms")
            rc.sweep_perturbation = ScalarField(grid, w)

    return rc


# ----------------------------------------------------------------------
# invariant bookkeeping
# ----------------------------------------------------------------------


class _Checks:
    """Counts per named invariant; a negative control 'passes' when the
    detection fires."""

    def __init__(self):
        self.counts = {}

    def record(self, name: str, ok: bool):
        slot = self.counts.setdefault(name, {"passed": 0, "failed": 0})
        slot["passed" if ok else "failed"] += 1

    @property
    def all_ok(self) -> bool:
        return all(slot["failed"] == 0 for slot in self.counts.values())


def _margins(u, P, coeffs):
    K = compute_constants(P, coeffs)
    m1, m2 = admissible_margins(u, P, K)
    return float(m1), float(m2)


def _diag_row(u, P, trace, wall_ms: float) -> dict:
    d = estimate_diagnostics(u, P)
    newton_total = sum(rec["newton_iters"] for rec in trace.steps
                       if rec["newton_iters"] is not None)
    return {
        "M": float(P.M),
        "sup_eu_over_M": d.sup_eu_over_M,
        "M_over_inf_eu": d.M_over_inf_eu,
        "c1_diag": d.c1_diag,
        "c2_diag": d.c2_diag,
        "c3_diag": d.c3_diag,
        "newton_total": int(newton_total),
        "wall_ms": float(wall_ms),
    }


def _core_checks(checks: _Checks, u, trace, P, coeffs):
    """Invariants contracted for every converged march."""
    res = residual(u, 1.0, P, coeffs)
    sup = float(np.max(np.abs(res.values)))
    checks.record("stokes_solution",
                  stokes_invariant(u, 1.0, P, coeffs) <= 1e-10 * (1.0 + sup))
    for rec in trace.steps:
        if rec["step_accepted"]:
            checks.record("lemma2_sandwich", bool(rec["lemma2_ok"]))
    m1, m2 = _margins(u, P, coeffs)
    checks.record("final_margins", m1 > 0 and m2 > 0)
    return sup, (m1, m2)


def _identity_checks(checks: _Checks, u, P, coeffs):
    """Integral identities contracted at every converged solution, with
    their negative controls."""
    k, gamma = P.k, P.gamma
    for p in (k + gamma + 1, k + gamma + 2, 2 * (k + gamma)):
        lhs, rhs = ibp_identity(u, p, P, coeffs)
        checks.record("ibp_identity",
                      abs(lhs - rhs) <= 1e-8 * (abs(lhs) + abs(rhs) + 1.0))
    off = ScalarField(
        u.grid,
        u.values + 0.3 * np.cos(2 * np.pi * u.grid.axis_coordinate(0)),
    )
    lhs, rhs = ibp_identity(off, k + gamma + 1, P, coeffs)
    checks.record("ibp_control_detects_non_solution",
                  abs(lhs - rhs) > 1e-5 * (abs(lhs) + abs(rhs) + 1.0))

    if k == 1 and gamma == 2.0:
        checks.record("sigma2_rewrite",
                      sigma2_rewrite_check(u, P, coeffs) <= 1e-7)
        checks.record("sigma2_control_detects_non_solution",
                      sigma2_rewrite_check(off, P, coeffs) > 1e-3)


# ----------------------------------------------------------------------
# mode runners
# ----------------------------------------------------------------------


def _write_json(path: str, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_artifacts(rc: RunConfig, u, trace, row, name="u"):
    write_snapshot(os.path.join(rc.output_dir, f"{name}.fyh"), u)
    with open(os.path.join(rc.output_dir, "trace.jsonl"), "w") as fh:
        trace.dump_jsonl(fh)
    with open(os.path.join(rc.output_dir, "diagnostics.csv"), "w",
              newline="") as fh:
        write_sweep_csv([row], fh)


def _base_summary(rc: RunConfig) -> dict:
    out = {
        "mode": rc.mode,
        "seed": rc.seed,
        "grid": {"n": rc.P.n, "N": rc.P.grid.N},
        "problem": {"k": rc.P.k, "gamma": rc.P.gamma, "alpha": rc.P.alpha,
                    "M": rc.P.M},
        "mu_projected": rc.mu_projected,
    }
    if rc.mu_projected:
        out["mu_mean_removed"] = rc.mu_mean_removed
    return out


def _finish(rc: RunConfig, summary: dict, checks: _Checks | None,
            code_on_fail: int = 4) -> int:
    if checks is not None:
        summary["invariant_pass_counts"] = checks.counts
        ok = checks.all_ok and summary.get("status", "ok") == "ok"
    else:
        ok = summary.get("status", "ok") == "ok"
    if ok:
        summary["status"] = "ok"
        code = 0
    elif summary.get("status", "ok") == "ok":
        summary["status"] = "invariant_violation"
        code = code_on_fail
    else:
        code = summary.get("exit_code", code_on_fail)
    summary["exit_code"] = code
    _write_json(os.path.join(rc.output_dir, "summary.json"), summary)
    return code


def _solver_failure(rc: RunConfig, summary: dict, exc: SolverError) -> int:
    summary["status"] = "solver_failure"
    summary["error"] = type(exc).__name__
    summary["detail"] = str(exc)
    last_t = getattr(exc, "last_good_t", None)
    if last_t is not None:
        summary["last_good_t"] = float(last_t)
    margins = getattr(exc, "margins", None)
    if margins is not None:
        m1, m2 = float(margins[0]), float(margins[1])
        summary["upsilon_margins"] = {"m1": m1, "m2": m2}
        if m1 <= 0:
            summary["violated_margin"] = "m1"
        elif m2 <= 0:
            summary["violated_margin"] = "m2"
        else:
            summary["violated_margin"] = "step_floor"
    summary["exit_code"] = 3
    _write_json(os.path.join(rc.output_dir, "summary.json"), summary)
    return 3


def _run_solve(rc: RunConfig) -> int:
    summary = _base_summary(rc)
    coeffs = extract_lrho(rc.P.rho, rc.P.grid)
    t0 = time.perf_counter()
    try:
        u, trace = continuity_march(rc.P, coeffs, rc.newton)
    except SolverError as exc:
        return _solver_failure(rc, summary, exc)
    wall_ms = (time.perf_counter() - t0) * 1e3

    checks = _Checks()
    sup, (m1, m2) = _core_checks(checks, u, trace, rc.P, coeffs)
    summary["final_residual"] = sup
    summary["upsilon_margins"] = {"m1": m1, "m2": m2}
    _write_artifacts(rc, u, trace, _diag_row(u, rc.P, trace, wall_ms))
    return _finish(rc, summary, checks)


def _run_manufactured(rc: RunConfig, battery: bool = False) -> int:
    summary = _base_summary(rc)
    grid = rc.P.grid
    u_star = ScalarField(grid, np.log(rc.P.M) + rc.profile.values)
    coeffs = extract_lrho(rc.P.rho, grid)
    try:
        case = manufacture(u_star, rc.P.n, rc.P.k, rc.P.gamma, rc.P.alpha,
                           rc.P.rho, grid)
        t0 = time.perf_counter()
        u, trace = continuity_march(case.P, coeffs, rc.newton)
    except SolverError as exc:
        return _solver_failure(rc, summary, exc)
    wall_ms = (time.perf_counter() - t0) * 1e3

    checks = _Checks()
    sup, (m1, m2) = _core_checks(checks, u, trace, case.P, coeffs)
    recovery = float(np.max(np.abs(u.values - case.u_star.values)))
    checks.record("manufactured_recovery", recovery <= rc.recovery_tol)
    _identity_checks(checks, u, case.P, coeffs)

    summary["final_residual"] = sup
    summary["upsilon_margins"] = {"m1": m1, "m2": m2}
    summary["recovery_error"] = recovery
    summary["recovery_tol"] = rc.recovery_tol
    summary["manufactured_M"] = case.meta["M"]

    if battery:
        _run_battery(checks, summary, rc, case, coeffs, u)

    write_snapshot(os.path.join(rc.output_dir, "u_star.fyh"), case.u_star)
    _write_artifacts(rc, u, trace, _diag_row(u, case.P, trace, wall_ms))
    return _finish(rc, summary, checks)


def _run_battery(checks: _Checks, summary: dict, rc: RunConfig, case,
                 coeffs, u):
    """The randomized invariants and remaining cross-checks, seeded."""
    grid = rc.P.grid
    rng = np.random.default_rng(rc.seed)
    P = case.P

    for _ in range(32):
        amp = rng.uniform(0.02, 0.3)
        kick = _random_trig(grid, amp, rng)
        v = ScalarField(grid, np.log(P.M) + kick)
        t = float(rng.choice([0.0, 0.5, 1.0]))
        res = residual(v, t, P, coeffs)
        ok = abs(integrate(res)) <= 1e-10 * (1.0 + np.max(np.abs(res.values)))
        checks.record("stokes_randomized", ok)

    # the constructor is the guard against mean-shifted forcing
    try:
        dataclasses.replace(P, mu=ScalarField(grid, P.mu.values + 0.37))
        checks.record("mu_mean_guard", False)
    except ValueError:
        checks.record("mu_mean_guard", True)

    checks.record("torsion_curvature", torsion_curvature_check(u) <= 1e-9)

    for ell in range(2, grid.n + 1):
        margin, _, rsup = sigma_second_variation_check(u, ell)
        checks.record("sigma_second_variation_solution",
                      margin <= 1e-12 * (1.0 + rsup))
    for _ in range(8):
        v = ScalarField(grid, _random_trig(grid, rng.uniform(0.01, 0.5), rng))
        for ell in range(2, grid.n + 1):
            margin, _, rsup = sigma_second_variation_check(v, ell)
            checks.record("sigma_second_variation_randomized",
                          margin <= 1e-10 * (1.0 + rsup))

    for _ in range(2000):
        m = int(rng.integers(1, 7))
        l = int(rng.integers(1, m + 1))
        lam = rng.standard_normal(m) * np.exp(rng.standard_normal())
        lhs, rhs = lemma1_bound(l, m, lam)
        checks.record("lemma1_randomized", lhs <= rhs * (1 + 1e-13))

    try:
        rep = uniqueness_probe(P, coeffs, rc.newton, perturbations=5,
                               seed=rc.seed)
        checks.record("uniqueness_probe", rep.within_tolerance)
        summary["uniqueness"] = {
            "runs": rep.runs,
            "rejected_starts": rep.rejected_starts,
            "max_pairwise_distance": rep.max_pairwise_distance,
        }
    except NonUniqueCandidate as exc:
        checks.record("uniqueness_probe", False)
        summary["uniqueness"] = {"error": str(exc)}


def _random_trig(grid, amp, rng, band=1, nmodes=4):
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


def _run_sweep(rc: RunConfig) -> int:
    summary = _base_summary(rc)
    try:
        if rc.threads > 1 and len(rc.sweep_Ms) > 1:
            with ThreadPoolExecutor(max_workers=rc.threads) as pool:
                chunks = pool.map(
                    lambda M: scale_sweep(rc.P, [M], rc.newton,
                                          perturbation=rc.sweep_perturbation),
                    rc.sweep_Ms,
                )
                rows = [row for chunk in chunks for row in chunk]
        else:
            rows = scale_sweep(rc.P, rc.sweep_Ms, rc.newton,
                               perturbation=rc.sweep_perturbation)
    except SolverError as exc:
        return _solver_failure(rc, summary, exc)

    with open(os.path.join(rc.output_dir, "diagnostics.csv"), "w",
              newline="") as fh:
        write_sweep_csv(rows, fh)
    s = sweep_summary(rows, factor=rc.sweep_factor)
    summary["sweep"] = s
    checks = _Checks()
    for col, entry in s["columns"].items():
        checks.record(f"sweep_{col}", entry["pass"])
    checks.record("sweep_c1_median_band", s["c1_median_band"]["pass"])
    checks.record("sweep_c3_no_growth", s["c3_no_growth"]["pass"])
    return _finish(rc, summary, checks)


def _run_min_scale(rc: RunConfig) -> int:
    summary = _base_summary(rc)
    coeffs = extract_lrho(rc.P.rho, rc.P.grid)
    rep = find_min_scale(rc.P, coeffs, rc.newton)
    summary["min_scale"] = {
        "succeeded": rep.succeeded,
        "M_lo": rep.M_lo,
        "M_fail": rep.M_fail,
        "attempts": rep.attempts,
    }
    if not rep.succeeded:
        summary["status"] = "solver_failure"
        summary["exit_code"] = 3
    return _finish(rc, summary, None, code_on_fail=3)


def run(config: RunConfig) -> int:
    """Execute one mode; returns the process exit code."""
    os.makedirs(config.output_dir, exist_ok=True)
    if config.mode == "solve":
        return _run_solve(config)
    if config.mode == "manufactured":
        return _run_manufactured(config)
    if config.mode == "verify-all":
        return _run_manufactured(config, battery=True)
    if config.mode == "sweep":
        return _run_sweep(config)
    if config.mode == "min-scale":
        return _run_min_scale(config)
    raise ConfigError(f"mode: unknown mode {config.mode!r}")  # pragma: no cover


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fuyau",
        description="Continuity-method solver and verification harness "
                    "for Fu-Yau Hessian equations on flat complex tori.",
    )
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", required=True, help="TOML config file")
    ap.add_argument("--out", help="output directory (overrides config)")
    ap.add_argument("--seed", type=int, help="seed for randomized suites")
    ap.add_argument("--grid-n", type=int, dest="grid_n",
                    help="complex dimension (overrides config)")
    ap.add_argument("--grid-N", type=int, dest="grid_N",
                    help="points per real coordinate (overrides config)")
    ap.add_argument("--allow-mu-projection", action="store_true",
                    help="remove a nonzero mean from mu instead of "
                         "rejecting the config (logged loudly)")
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        with open(args.config, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        print(f"fuyau: cannot read config: {exc}", file=sys.stderr)
        return 2
    except tomllib.TOMLDecodeError as exc:
        print(f"fuyau: config parse error: {exc}", file=sys.stderr)
        return 2

    try:
        rc = validate_config(
            raw, args.mode,
            base_dir=os.path.dirname(os.path.abspath(args.config)),
            allow_mu_projection=args.allow_mu_projection,
            grid_n=args.grid_n, grid_N=args.grid_N,
            seed=args.seed, out=args.out,
        )
        return run(rc)
    except ConfigError as exc:
        print(f"fuyau: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
