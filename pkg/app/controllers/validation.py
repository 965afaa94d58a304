"""
Check suites behind the `validate` subcommand.

Each check returns a ValidationCheck; the report passes only when every check does.
Randomized checks draw from numpy generators seeded by the `validate` config block.
"""
from __future__ import annotations

import logging
from typing import List, Optional, Sequence

import numpy as np

from app.controllers.bsde_solver import BsdeSolution, girsanov_min_weight, solve
from app.controllers.cascade import (
    FORWARD,
    INVERSE,
    change_of_variables,
    exp_identity_gap,
    shift_process,
    solve_quadratic,
    truncate_terminal_two_sided,
)
from app.controllers.generator import (
    GeneratorKind,
    GeneratorSpec,
    apriori_constants,
    f_1m_eval,
    f_eval,
    f_km_eval,
    f_tilde_eval,
    gamma_bounds,
    gamma_eval,
    lambda_envelope,
    lambda_slope,
)
from app.controllers.lattice import Lattice
from app.controllers.levy_measure import u_alpha_norm
from app.controllers.market import MarketSpec, theta
from app.models.schemas import ValidateBlock, ValidationCheck, ValidationReport

logger = logging.getLogger(__name__)

IDENTITY_TOL = 1e-12
SANDWICH_SLACK = 1e-10
ORDER_SLACK = 1e-12
# Separate cascades (different N) are compared in the truncated-terminal check
COMPARISON_SLACK = 1e-9
TELESCOPING_TOL = 1e-10
ROUND_TRIP_TOL = 1e-12
EXP_IDENTITY_TOL = 1e-9
# O(dt) allowance of the Doleans-Dade product: 0.02 at dt = 1/16
DOLEANS_PER_DT = 0.32

# Sampling boxes of the randomized generator checks
Z_RANGE = 3.0
U_RANGE = 1.0
TIME_BATCHES = 32


def _check(name: str, violations: int, worst: float, detail: str = "") -> ValidationCheck:
    return ValidationCheck(name=name, passed=violations == 0, violations=int(violations), worst=float(worst), detail=detail or None)


def _sample_points(spec: MarketSpec, rng: np.random.Generator, size: int):
    t = rng.uniform(0.0, spec.T, size=size)
    z = rng.uniform(-Z_RANGE, Z_RANGE, size=size)
    u = rng.uniform(-U_RANGE, U_RANGE, size=(size, spec.grid.size))
    return t, z, u


# ============ GENERATOR IDENTITIES ============

def check_functional_identities(
    spec: MarketSpec, m_schedule: Sequence[Optional[int]], samples: int, rng: np.random.Generator
) -> ValidationCheck:
    """f~(t,0,0) = f^{1,m}(t,0,0) = f^{k,m}(t,0,0) = 0."""
    times = rng.uniform(0.0, spec.T, size=samples)
    J = spec.grid.size
    zero_u = np.zeros(J)
    M_cap = apriori_constants(spec, 1.0)[2]
    worst = 0.0
    violations = 0
    for t in times:
        values = [float(f_tilde_eval(spec, float(t), 0.0, zero_u))]
        for m in m_schedule:
            gen = GeneratorSpec(spec, GeneratorKind.F_1M, m=m, M_cap=M_cap if m is not None else None)
            values.append(float(f_1m_eval(gen, float(t), 0.0, zero_u)))
            a_z = float(rng.uniform(-1.0, 1.0))
            a_u = rng.uniform(-0.5, 0.5, size=J)
            values.append(float(f_km_eval(gen, float(t), 0.0, zero_u, anchor_z=a_z, anchor_u=a_u)))
        err = max(abs(v) for v in values)
        worst = max(worst, err)
        violations += int(err > IDENTITY_TOL)
    return _check("functional_identities", violations, worst)


def check_growth_sandwich(spec: MarketSpec, samples: int, rng: np.random.Generator) -> ValidationCheck:
    """-theta z - theta^2/(2 alpha) <= f(t, z, u) <= (alpha/2) z^2 + |u|_alpha."""
    _, z_all, u_all = _sample_points(spec, rng, samples)
    alpha = spec.alpha
    violations = 0
    worst = 0.0
    n_times = min(samples, TIME_BATCHES)
    times = rng.uniform(0.0, spec.T, size=n_times)
    for t, idx in zip(times, np.array_split(np.arange(samples), n_times)):
        z, u = z_all[idx], u_all[idx]
        th = theta(spec, float(t))
        f_val = np.asarray(f_eval(spec, float(t), z, u).value).reshape(-1)
        lower = -th * z - th * th / (2.0 * alpha)
        upper = 0.5 * alpha * z * z + np.asarray(u_alpha_norm(alpha, u, spec.grid.w)).reshape(-1)
        excess = np.maximum(lower - f_val, f_val - upper)
        violations += int(np.sum(excess > SANDWICH_SLACK))
        worst = max(worst, float(excess.max()))
    return _check("growth_sandwich", violations, worst)


def check_jump_increments(spec: MarketSpec, samples: int, rng: np.random.Generator) -> ValidationCheck:
    """
    f(u) - f(u') <= sum_j w_j gamma_j (u_j - u'_j) with gamma inside (-1 + delta_K, C_bar_K);
    equality when beta == 0.
    """
    if spec.grid.size == 0:
        return _check("jump_increments", 0, 0.0, detail="no jump atoms")
    t_all, z_all, u_all = _sample_points(spec, rng, samples)
    up_all = rng.uniform(-U_RANGE, U_RANGE, size=u_all.shape)
    low, high = gamma_bounds(spec, U_RANGE)
    w = spec.grid.w
    exact = spec.max_abs_beta() == 0.0
    violations = 0
    worst = 0.0
    for k in range(samples):
        t = float(t_all[k])
        z, u, up = z_all[k], u_all[k], up_all[k]
        gamma = np.asarray(gamma_eval(spec, t, u, up))
        lhs = float(f_eval(spec, t, z, u).value) - float(f_eval(spec, t, z, up).value)
        rhs = float(np.sum(w * gamma * (u - up)))
        gap = lhs - rhs
        err = abs(gap) if exact else gap
        bounds_bad = bool(np.any(gamma < low - SANDWICH_SLACK) or np.any(gamma > high + SANDWICH_SLACK))
        limit = IDENTITY_TOL if exact else SANDWICH_SLACK
        if err > limit or bounds_bad:
            violations += 1
        worst = max(worst, err)
    detail = f"gamma range ({low:.6g}, {high:.6g})" + ("; beta == 0, identity mode" if exact else "")
    return _check("jump_increments", violations, worst, detail)


def check_z_slope(spec: MarketSpec, samples: int, rng: np.random.Generator) -> ValidationCheck:
    """|f(z,u) - f(z',u)| / |z - z'| within the envelope kappa + alpha (|z| + |z'|)."""
    t_all, z_all, u_all = _sample_points(spec, rng, samples)
    zp_all = rng.uniform(-Z_RANGE, Z_RANGE, size=samples)
    violations = 0
    worst = 0.0
    for k in range(samples):
        t = float(t_all[k])
        slope = abs(float(lambda_slope(spec, t, z_all[k], zp_all[k], u_all[k])))
        envelope = float(lambda_envelope(spec, t, z_all[k], zp_all[k]))
        excess = slope - envelope
        violations += int(excess > SANDWICH_SLACK)
        worst = max(worst, excess)
    return _check("z_slope_envelope", violations, worst)


# ============ SOLVER CHECKS ============

def check_apriori(solution: BsdeSolution) -> ValidationCheck:
    report = solution.apriori
    if report is None:
        return _check("apriori_bounds", 1, float("nan"), detail="solution carries no a priori report")
    failed = [c.name for c in report.checks if not c.passed]
    worst = max((c.worst_value or 0.0 for c in report.checks if not c.passed), default=0.0)
    return _check("apriori_bounds", len(failed), worst, detail=", ".join(failed))


def check_cascade(solution: BsdeSolution) -> List[ValidationCheck]:
    trace = solution.trace
    if trace is None:
        return [_check("cascade_stage_bounds", 1, float("nan"), detail="solution carries no cascade trace")]
    records = [s.record for s in trace.stages]
    bound_bad = [r for r in records if not r.bound_ok]
    worst_excess = max((r.sup_abs_Y - r.bound for r in records), default=0.0)
    tele = max((r.telescoping_residual for r in records), default=0.0)
    first = records[0].monotone_gap if records else 0.0
    running = min((r.running_sum_monotone_gap for r in records), default=0.0)
    detail = "HEURISTIC N_override" if trace.heuristic else ""
    return [
        _check("cascade_stage_bounds", len(bound_bad), worst_excess, detail),
        _check("telescoping", int(tele > TELESCOPING_TOL), tele),
        _check("monotone_in_m", int(first < -ORDER_SLACK) + int(running < -ORDER_SLACK), min(first, running)),
    ]


def check_change_of_variables(
    solution: BsdeSolution, lattice: Lattice, spec: MarketSpec, picard_tol: float
) -> List[ValidationCheck]:
    A = shift_process(lattice, spec)
    tilde = change_of_variables(solution, INVERSE, lattice, spec, A)
    back = change_of_variables(tilde, FORWARD, lattice, spec, A)
    round_trip = max(
        max(float(np.max(np.abs(a - b))) for a, b in zip(back.Y, solution.Y)),
        max((float(np.max(np.abs(a - b))) for a, b in zip(back.Z, solution.Z)), default=0.0),
    )
    transported = solution.trace.transported_residual if solution.trace is not None else None
    gaps = exp_identity_gap(tilde, solution, lattice, spec)
    doleans_limit = DOLEANS_PER_DT * lattice.dt
    checks = [
        _check("change_of_variables_round_trip", int(round_trip > ROUND_TRIP_TOL), round_trip),
        _check("exp_identity", int(gaps["exact"] > EXP_IDENTITY_TOL), gaps["exact"]),
        _check(
            "doleans_consistency", int(gaps["doleans"] > doleans_limit), gaps["doleans"],
            detail=f"limit {doleans_limit:.3g}",
        ),
    ]
    if transported is not None:
        checks.append(_check("transported_residual", int(transported > picard_tol), transported))
    return checks


def check_comparison(
    spec: MarketSpec,
    lattice: Lattice,
    m_schedule: Sequence[Optional[int]],
    pairs: int,
    rng: np.random.Generator,
    picard_tol: float,
    max_iter: int,
) -> ValidationCheck:
    """Terminal pairs xi1 <= xi2 give Y1 <= Y2 under the first truncated generator."""
    if pairs == 0:
        return _check("comparison", 0, 0.0, detail="no pairs requested")
    level = next((m for m in m_schedule if m is not None), None)
    size = lattice.level_size(lattice.n_steps)
    M_cap = apriori_constants(spec, 1.0, lattice.times)[2]
    gen = GeneratorSpec(spec, GeneratorKind.F_1M, m=level, M_cap=M_cap if level is not None else None)
    violations = 0
    worst = 0.0
    min_weight = 1.0
    for _ in range(pairs):
        xi1 = rng.uniform(-0.05, 0.05, size=size)
        xi2 = xi1 + rng.uniform(0.0, 0.05, size=size)
        s1 = solve(lattice, gen, xi1, picard_tol, max_iter)
        s2 = solve(lattice, gen, xi2, picard_tol, max_iter)
        gap = min(float(np.min(b - a)) for a, b in zip(s1.Y, s2.Y))
        worst = min(worst, gap)
        violations += int(gap < -ORDER_SLACK)
        if spec.grid.size:
            gammas = [
                np.asarray(gamma_eval(spec, float(lattice.times[i]), s2.U[i], s1.U[i]))
                for i in range(lattice.n_steps)
            ]
            weight = girsanov_min_weight(lattice, gammas)
            min_weight = min(min_weight, weight)
            # comparison relies on a positive change of measure between the two solutions
            violations += int(weight <= 0.0)
    return _check("comparison", violations, worst, detail=f"min change-of-measure weight {min_weight:.6g}")


def check_truncated_terminal(
    spec: MarketSpec,
    lattice: Lattice,
    B_bar: np.ndarray,
    levels: Sequence[int],
    m_schedule: Sequence[Optional[int]],
    N_override: Optional[int],
    picard_tol: float,
    max_iter: int,
) -> ValidationCheck:
    """Y(B+ ∧ n - B- ∧ p) nondecreasing in n and equal to Y(B) once n >= max B."""
    B_bar = np.asarray(B_bar, dtype=float)
    p = max(1.0, float(np.max(np.maximum(-B_bar, 0.0))) if B_bar.size else 1.0)
    top = float(np.max(np.maximum(B_bar, 0.0))) if B_bar.size else 0.0
    levels = sorted(set(int(n) for n in levels if n >= 1))
    if not levels:
        return _check("truncated_terminal", 0, 0.0, detail="no truncation levels")
    Y0s = []
    for n in levels:
        truncated = truncate_terminal_two_sided(B_bar, n, p)
        sol = solve_quadratic(lattice, spec, truncated, m_schedule, N_override, picard_tol, max_iter)
        Y0s.append(sol.Y)
    violations = 0
    worst = 0.0
    for a, b in zip(Y0s, Y0s[1:]):
        gap = min(float(np.min(y2 - y1)) for y1, y2 in zip(a, b))
        worst = min(worst, gap)
        violations += int(gap < -COMPARISON_SLACK)
    stable = [Y for n, Y in zip(levels, Y0s) if n >= top]
    for a, b in zip(stable, stable[1:]):
        drift = max(float(np.max(np.abs(y2 - y1))) for y1, y2 in zip(a, b))
        violations += int(drift > ORDER_SLACK)
    return _check("truncated_terminal", violations, worst, detail=f"levels {levels}, max B+ {top:.6g}")


# ============ SUITE ============

def run_validation(
    spec: MarketSpec,
    lattice: Lattice,
    B_bar: np.ndarray,
    options: ValidateBlock,
    m_schedule: Sequence[Optional[int]],
    N_override: Optional[int],
    picard_tol: float,
    max_iter: int,
) -> ValidationReport:
    rng = np.random.default_rng(options.seed)
    samples = options.samples
    checks: List[ValidationCheck] = [
        check_functional_identities(spec, m_schedule, max(1, samples // 10), rng),
        check_growth_sandwich(spec, samples, rng),
        check_jump_increments(spec, samples, rng),
        check_z_slope(spec, samples, rng),
    ]
    solution = solve_quadratic(lattice, spec, B_bar, m_schedule, N_override, picard_tol, max_iter)
    checks.append(check_apriori(solution))
    checks.extend(check_cascade(solution))
    checks.extend(check_change_of_variables(solution, lattice, spec, picard_tol))
    checks.append(check_comparison(spec, lattice, m_schedule, options.comparison_pairs, rng, picard_tol, max_iter))
    checks.append(check_truncated_terminal(
        spec, lattice, B_bar, options.truncation_levels, m_schedule, N_override, picard_tol, max_iter
    ))
    report = ValidationReport(passed=all(c.passed for c in checks), checks=checks)
    for c in checks:
        if not c.passed:
            logger.warning(f"⚠️ Check {c.name} failed: {c.violations} violation(s), worst={c.worst}")
    logger.info(f"Validation: {sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return report
