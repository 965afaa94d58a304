import numpy as np
import pytest

from app.controllers.bsde_solver import FunctionDriver, picard_residual, solve
from app.controllers.cascade import (
    FORWARD,
    INVERSE,
    CascadeConfig,
    assemble,
    change_of_variables,
    compute_N,
    exp_identity_gap,
    resolve_N,
    run_cascade,
    run_stage,
    shift_process,
    solve_quadratic,
    stage_threshold,
    truncate_terminal,
    truncate_terminal_two_sided,
)
from app.controllers.generator import GeneratorKind, GeneratorSpec, inner_objective
from app.controllers.lattice import MODE_MARKOV, build
from app.controllers.levy_measure import equivalence_constant
from app.controllers.market import terminal_liability, theta
from app.core.exceptions import ConfigurationError, ParameterError


def _call_problem(market, n_steps, cap=0.1):
    lattice = build(n_steps, market.grid, market.T)
    prices = lattice.price_levels(market)[-1]
    B_bar = terminal_liability({"kind": "call", "strike": 1.0, "cap": cap}, prices)
    return lattice, B_bar


# ============ splitting ============

def test_compute_N_examples():
    assert compute_N(1.0, 1.0, 2.0, 1) == 32
    assert compute_N(1.0, 1.0, 2.0, 2) == 48
    assert compute_N(0.5, 1.0, 1.0, 1) == 16
    assert compute_N(0.0, 1.0, 1.0) == 1
    C = equivalence_constant(1.0, 2.0)
    assert compute_N(1.0, 1.0, C, 1) == 57
    assert compute_N(1.0, 1.0, C, 2) == 85


def test_compute_N_meets_threshold():
    for M_B, alpha, C in [(0.3, 2.0, 1.7), (2.5, 0.1, 4.0), (1.0, 1.0, 2.0)]:
        for stage in (1, 2):
            N = compute_N(M_B, alpha, C, stage)
            assert M_B / N <= stage_threshold(alpha, C, stage) + 1e-15
            assert N == 1 or M_B / (N - 1) > stage_threshold(alpha, C, stage)


def test_compute_N_rejects_bad_input():
    with pytest.raises(ParameterError):
        compute_N(-1.0, 1.0, 1.0)
    with pytest.raises(ParameterError):
        compute_N(1.0, 0.0, 1.0)


def test_resolve_N_override_and_cap(monkeypatch):
    from app.core import config

    cfg = CascadeConfig(B=np.array([1.0]), M_B=1.0, alpha=1.0, C=2.0, N_override=5)
    assert resolve_N(cfg) == (5, 32, 48, True)
    cfg = CascadeConfig(B=np.array([1.0]), M_B=1.0, alpha=1.0, C=2.0, N_override=60)
    assert resolve_N(cfg) == (60, 32, 48, False)
    monkeypatch.setattr(config.settings, "N_STAGE_CAP", 10)
    with pytest.raises(ConfigurationError) as err:
        resolve_N(CascadeConfig(B=np.array([1.0]), M_B=1.0, alpha=1.0, C=2.0))
    assert err.value.pointer == "/cascade/N_override"


def test_cascade_config_checks():
    with pytest.raises(ParameterError):
        CascadeConfig(B=np.array([2.0]), M_B=1.0, alpha=1.0, C=1.0)
    with pytest.raises(ConfigurationError):
        CascadeConfig(B=np.array([1.0]), M_B=1.0, alpha=1.0, C=1.0, m_schedule=[None, 2])
    with pytest.raises(ConfigurationError):
        CascadeConfig(B=np.array([1.0]), M_B=1.0, alpha=1.0, C=1.0, m_schedule=[3, 2])


def test_truncated_terminals():
    B = np.array([-3.0, -0.5, 0.0, 1.5, 4.0])
    assert truncate_terminal(np.abs(B), 2.0).tolist() == [2.0, 0.5, 0.0, 1.5, 2.0]
    assert truncate_terminal_two_sided(B, 2.0, 1.0).tolist() == [-1.0, -0.5, 0.0, 1.5, 2.0]
    prev = truncate_terminal(np.abs(B), 1.0)
    for n in (2.0, 3.0, 5.0):
        cur = truncate_terminal(np.abs(B), n)
        assert np.all(cur >= prev)
        prev = cur
    with pytest.raises(ParameterError):
        truncate_terminal(B, 0.5)


# ============ stages ============

def test_stage_two_needs_anchors(one_atom_market):
    lattice, B_bar = _call_problem(one_atom_market, 2)
    cfg = CascadeConfig.for_terminal(B_bar, one_atom_market, lattice.times)
    with pytest.raises(ConfigurationError):
        run_stage(2, lattice, one_atom_market, cfg, {}, 3)


def test_cascade_telescopes_and_assembles(one_atom_market):
    lattice, B_bar = _call_problem(one_atom_market, 3)
    cfg = CascadeConfig.for_terminal(B_bar, one_atom_market, lattice.times, m_schedule=[1, 2, None])
    trace = run_cascade(lattice, one_atom_market, cfg)
    assert len(trace.stages) == trace.N
    assert not trace.heuristic
    for stage in trace.stages:
        assert stage.record.telescoping_residual < 1e-8
        assert stage.record.running_sum_monotone_gap >= -1e-9
    assert trace.stages[0].record.monotone_gap >= -1e-9
    total = assemble(trace, lattice)
    assert total.Y0 == pytest.approx(sum(s.solution.Y0 for s in trace.stages), abs=1e-12)
    assert np.allclose(total.Y[-1], B_bar)
    assert trace.assembled_residual < 1e-8
    report = trace.to_report()
    assert report.N == trace.N and len(report.stages) == trace.N


# ============ full pipeline ============

def test_quadratic_solution_matches_direct_scheme(one_atom_market):
    lattice, B_bar = _call_problem(one_atom_market, 4)
    sol = solve_quadratic(lattice, one_atom_market, B_bar)
    direct = solve(lattice, GeneratorSpec(one_atom_market, GeneratorKind.F), B_bar)
    assert sol.Y0 == pytest.approx(direct.Y0, abs=1e-8)

    # generator by brute force over a fine grid of positions
    market = one_atom_market
    grid = np.linspace(market.constraint.lo, market.constraint.hi, 10_001)

    def brute(t, y, z, u):
        th = theta(market, t)
        values = inner_objective(market, t, grid[None, :], z[:, None], u[:, None, :])
        return np.min(values, axis=1) - th * z - th * th / (2 * market.alpha)

    oracle = solve(lattice, FunctionDriver(brute, depends_on_y=False), B_bar)
    assert max(float(np.max(np.abs(a - b))) for a, b in zip(sol.Y, oracle.Y)) <= 1e-4
    assert sol.trace is not None and sol.apriori is not None
    assert sol.trace.transported_residual < 1e-8


def test_merton_quadratic_solution(merton_market):
    lattice = build(16, merton_market.grid, merton_market.T, MODE_MARKOV)
    sol = solve_quadratic(lattice, merton_market, np.zeros(lattice.level_size(16)))
    assert sol.Y0 == pytest.approx(-0.02, abs=1e-8)


def test_terminal_size_is_checked(one_atom_market):
    lattice, _ = _call_problem(one_atom_market, 2)
    with pytest.raises(ParameterError):
        solve_quadratic(lattice, one_atom_market, np.zeros(3))


# ============ change of variables ============

def test_change_of_variables_round_trip(one_atom_market):
    lattice, B_bar = _call_problem(one_atom_market, 3)
    sol = solve(lattice, GeneratorSpec(one_atom_market, GeneratorKind.F_TILDE), B_bar)
    A = shift_process(lattice, one_atom_market)
    bar = change_of_variables(sol, FORWARD, lattice, one_atom_market, A)
    back = change_of_variables(bar, INVERSE, lattice, one_atom_market, A)
    for y0, y1 in zip(sol.Y, back.Y):
        assert np.max(np.abs(y0 - y1)) < 1e-12
    for z0, z1 in zip(sol.Z, back.Z):
        assert np.max(np.abs(z0 - z1)) < 1e-12
    gaps = exp_identity_gap(sol, bar, lattice, one_atom_market)
    assert gaps["exact"] < 1e-12
    with pytest.raises(ParameterError):
        change_of_variables(sol, "sideways", lattice, one_atom_market)


def test_transported_solution_solves_the_original_equation(one_atom_market):
    lattice, B_bar = _call_problem(one_atom_market, 3)
    A = shift_process(lattice, one_atom_market)
    tilde = solve(lattice, GeneratorSpec(one_atom_market, GeneratorKind.F_TILDE), B_bar + A[-1])
    bar = change_of_variables(tilde, FORWARD, lattice, one_atom_market, A)
    assert np.allclose(bar.Y[-1], B_bar)
    assert picard_residual(bar, lattice, GeneratorSpec(one_atom_market)) < 1e-10
