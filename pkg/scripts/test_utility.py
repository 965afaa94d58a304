import math

import numpy as np
import pytest

from app.controllers.cascade import solve_quadratic
from app.controllers.lattice import MODE_MARKOV, build, sample_branches
from app.controllers.market import terminal_liability
from app.controllers import utility
from app.controllers.utility import (
    BSDE_MARTINGALE_PER_DT,
    A_process,
    StrategyTable,
    discrete_value,
    nested_gaps,
    one_step_gaps,
    optimal_strategy,
    random_strategies,
    simulate_terminal_wealth,
    value_function,
    verify_optimality,
    wealth_levels,
)
from app.core.exceptions import AdmissibilityError, ParameterError, ShapeError


@pytest.fixture
def merton_solution(merton_market):
    lattice = build(16, merton_market.grid, merton_market.T, MODE_MARKOV)
    return lattice, solve_quadratic(lattice, merton_market, np.zeros(lattice.level_size(16)))


@pytest.fixture
def jump_problem(jump_market):
    lattice = build(3, jump_market.grid, jump_market.T)
    prices = lattice.price_levels(jump_market)[-1]
    B_bar = terminal_liability({"kind": "call", "strike": 1.0, "cap": 0.2}, prices)
    return lattice, B_bar


def test_value_function():
    assert value_function(0.0, 1.0, 2.0) == pytest.approx(-math.exp(-2.0))
    assert value_function(0.5, 0.5, 3.0) == -1.0
    with pytest.raises(ParameterError):
        value_function(0.0, 1.0, 0.0)
    with pytest.raises(ParameterError):
        value_function(0.0, -1000.0, 1.0)


# ============ strategies ============

def test_strategy_table_checks(zero_market):
    lattice = build(2, zero_market.grid, zero_market.T)
    with pytest.raises(AdmissibilityError):
        StrategyTable.constant(lattice, 2.0, zero_market.constraint)
    with pytest.raises(ShapeError):
        StrategyTable(lattice, [np.zeros(1)], zero_market.constraint)
    table = StrategyTable.constant(lattice, 0.5, zero_market.constraint)
    assert table.name == "const_0.5"
    assert table.max_abs == 0.5
    assert table.shifted(-0.25).pi[1].tolist() == [0.25, 0.25]
    frame = table.to_frame()
    assert list(frame.columns) == ["time_index", "node_id", "t", "pi"]
    assert len(frame) == 1 + 2


def test_random_strategies_are_reproducible(jump_market):
    lattice = build(2, jump_market.grid, jump_market.T)
    a = random_strategies(lattice, jump_market.constraint, 3, seed=9)
    b = random_strategies(lattice, jump_market.constraint, 3, seed=9)
    assert [s.name for s in a] == ["random_0", "random_1", "random_2"]
    for s, t in zip(a, b):
        assert all(np.array_equal(p, q) for p, q in zip(s.pi, t.pi))
        assert jump_market.constraint.contains(np.concatenate(s.pi))


def test_merton_optimal_position(merton_solution, merton_market):
    lattice, sol = merton_solution
    pi_star = optimal_strategy(sol, merton_market, lattice)
    assert all(np.allclose(p, 0.2, atol=1e-6) for p in pi_star.pi)


def test_a_process_vanishes_only_for_the_optimizer(merton_solution, merton_market):
    lattice, sol = merton_solution
    pi_star = optimal_strategy(sol, merton_market, lattice)
    assert max(float(np.max(np.abs(a))) for a in A_process(pi_star, sol, merton_market, lattice)) < 1e-9
    other = StrategyTable.constant(lattice, 1.0, merton_market.constraint)
    increments = A_process(other, sol, merton_market, lattice)
    # alpha (alpha/2) (pi - pi*)^2 sigma^2 dt
    assert all(np.allclose(a, 0.5 * 0.8 ** 2 / 16) for a in increments)


# ============ dynamic program ============

def test_discrete_value_close_to_bsde(merton_solution, merton_market):
    lattice, sol = merton_solution
    Y_hat, pi_hat = discrete_value(merton_market, lattice, np.zeros(lattice.level_size(16)))
    assert Y_hat[0][0] == pytest.approx(sol.Y0, abs=1e-3)
    assert pi_hat.pi[0][0] == pytest.approx(0.2, abs=0.01)


def test_one_step_gaps(jump_market, jump_problem):
    lattice, B_bar = jump_problem
    Y_hat, pi_hat = discrete_value(jump_market, lattice, B_bar)
    assert max(float(np.max(np.abs(g))) for g in one_step_gaps(jump_market, lattice, Y_hat, pi_hat)) < 1e-12
    for s in random_strategies(lattice, jump_market.constraint, 5, seed=2):
        assert min(float(g.min()) for g in one_step_gaps(jump_market, lattice, Y_hat, s)) >= -1e-9


def test_nested_gaps_on_tree(jump_market, jump_problem):
    lattice, B_bar = jump_problem
    Y_hat, pi_hat = discrete_value(jump_market, lattice, B_bar)
    pairs = [(0, 3), (1, 3), (0, 2)]
    assert abs(nested_gaps(jump_market, lattice, Y_hat, pi_hat, 1.0, pairs)) < 1e-9
    for s in random_strategies(lattice, jump_market.constraint, 3, seed=4):
        assert nested_gaps(jump_market, lattice, Y_hat, s, 1.0, pairs) >= -1e-9


def test_wealth_needs_tree(merton_market):
    lattice = build(2, merton_market.grid, merton_market.T, MODE_MARKOV)
    table = StrategyTable.constant(lattice, 0.0, merton_market.constraint)
    with pytest.raises(ParameterError):
        wealth_levels(lattice, merton_market, table, 1.0)


def test_zero_position_keeps_wealth(jump_market):
    lattice = build(3, jump_market.grid, jump_market.T)
    batch = sample_branches(lattice, 100, seed=0)
    table = StrategyTable.constant(lattice, 0.0, jump_market.constraint)
    X_T, X_min = simulate_terminal_wealth(jump_market, lattice, batch, table, 2.0)
    assert np.all(X_T == 2.0) and np.all(X_min == 2.0)


# ============ full verification ============

def test_zero_market_verifies(zero_market):
    lattice = build(4, zero_market.grid, zero_market.T)
    sol = solve_quadratic(lattice, zero_market, np.zeros(lattice.level_size(4)))
    report = verify_optimality(zero_market, lattice, sol, 1.0, paths=2000, seed=1, n_random=3)
    assert report.passed
    assert report.V_formula == pytest.approx(-math.exp(-2.0))
    assert report.V_mc_estimate == pytest.approx(report.V_formula)
    assert report.V_mc_se == pytest.approx(0.0, abs=1e-12)
    assert report.exact_mode == "tree"
    assert len(report.per_strategy) == 4


def test_bsde_martingale_gap_is_gated(zero_market, monkeypatch):
    lattice = build(4, zero_market.grid, zero_market.T)
    sol = solve_quadratic(lattice, zero_market, np.zeros(lattice.level_size(4)))
    # no gap can pass a negative limit
    monkeypatch.setattr(utility, "BSDE_MARTINGALE_PER_DT", -1.0)
    report = verify_optimality(zero_market, lattice, sol, 1.0, paths=2000, seed=1, n_random=3)
    assert not report.passed
    assert report.bsde_martingale_max_abs_gap == pytest.approx(0.0, abs=1e-12)


def test_merton_monte_carlo_matches_value(merton_solution, merton_market):
    lattice, sol = merton_solution
    report = verify_optimality(merton_market, lattice, sol, 0.5, paths=100_000, seed=3, n_random=2)
    star = report.per_strategy[0]
    assert star.id == "pi_star"
    assert abs(star.estimate - report.V_formula) <= 3 * star.se
    assert report.bsde_martingale_max_abs_gap <= BSDE_MARTINGALE_PER_DT * lattice.dt
    assert report.A_max_abs_optimal < 1e-6
    assert report.A_min_random >= -1e-12
    assert report.supermartingale_worst_gap >= -1e-9
    assert report.nested_worst_gap == 0.0


def test_inadmissible_strategy_is_rejected(zero_market):
    lattice = build(2, zero_market.grid, zero_market.T)
    sol = solve_quadratic(lattice, zero_market, np.zeros(lattice.level_size(2)))
    bad = StrategyTable.constant(lattice, 0.5, zero_market.constraint)
    bad.pi[0] = np.array([3.0])
    with pytest.raises(AdmissibilityError):
        verify_optimality(zero_market, lattice, sol, 1.0, strategies=[bad], paths=10)
