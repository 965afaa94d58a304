import numpy as np
import pytest

from app.controllers.bsde_solver import (
    BsdeSolution,
    FunctionDriver,
    check_apriori,
    girsanov_min_weight,
    picard_residual,
    residual_by_level,
    solve,
    zero_driver,
)
from app.controllers.generator import GeneratorSpec
from app.controllers.lattice import MODE_MARKOV, build
from app.controllers.levy_measure import JumpGrid
from app.controllers.market import terminal_liability
from app.core.exceptions import ConvergenceError, ShapeError
from app.core.execution_context import scoped


def _brownian_terminal(lattice):
    """W_T on a jump-free Markov lattice (branch 0 is the up move)."""
    ups = lattice.states[-1][:, 0]
    downs = lattice.states[-1][:, 1]
    return (ups - downs) * np.sqrt(lattice.dt)


def _linear_z_driver(theta):
    return FunctionDriver(lambda t, y, z, u: -theta * z, depends_on_y=False, label="linear_z")


def test_zero_driver_keeps_constants():
    lattice = build(3, JumpGrid([0.5], [1.0]), 1.0)
    sol = solve(lattice, zero_driver(), np.full(lattice.level_size(3), 2.5))
    assert all(np.allclose(y, 2.5) for y in sol.Y)
    assert all(np.allclose(z, 0.0) for z in sol.Z)
    assert all(np.allclose(u, 0.0) for u in sol.U)
    assert sol.max_residual == 0.0


def test_linear_driver_on_brownian_terminal():
    lattice = build(8, JumpGrid.empty(), 1.0, MODE_MARKOV)
    sol = solve(lattice, _linear_z_driver(0.3), _brownian_terminal(lattice))
    assert sol.Y0 == pytest.approx(-0.3, abs=1e-12)
    assert all(np.allclose(z, 1.0) for z in sol.Z)


def test_weak_order_one_on_squared_terminal():
    errors = []
    for n in (8, 16, 32):
        lattice = build(n, JumpGrid.empty(), 1.0, MODE_MARKOV)
        sol = solve(lattice, _linear_z_driver(1.0), _brownian_terminal(lattice) ** 2)
        # discrete value is T + theta^2 T^2 - theta^2 T dt
        assert sol.Y0 == pytest.approx(2.0 - lattice.dt, abs=1e-12)
        errors.append(abs(sol.Y0 - 2.0))
    assert errors[1] / errors[0] == pytest.approx(0.5)
    assert errors[2] / errors[1] == pytest.approx(0.5)


def test_implicit_y_driver():
    lattice = build(10, JumpGrid.empty(), 1.0, MODE_MARKOV)
    rate = 0.5
    driver = FunctionDriver(lambda t, y, z, u: -rate * y, depends_on_y=True)
    sol = solve(lattice, driver, np.ones(lattice.level_size(10)), picard_tol=1e-13)
    assert sol.Y0 == pytest.approx((1 + rate * lattice.dt) ** -10, rel=1e-12)
    assert sol.summary().max_iterations > 1


def test_merton_generator(merton_market):
    lattice = build(16, merton_market.grid, merton_market.T, MODE_MARKOV)
    sol = solve(lattice, GeneratorSpec(merton_market), np.zeros(lattice.level_size(16)))
    assert sol.Y0 == pytest.approx(-0.02, abs=1e-12)
    assert sol.generator == "F"


def test_residual_detects_perturbation(merton_market):
    lattice = build(4, merton_market.grid, merton_market.T, MODE_MARKOV)
    driver = GeneratorSpec(merton_market)
    sol = solve(lattice, driver, np.zeros(lattice.level_size(4)))
    assert picard_residual(sol, lattice, driver) < 1e-12
    sol.Y[0] = sol.Y[0] + 1.0
    assert picard_residual(sol, lattice, driver) >= 0.9
    assert residual_by_level(sol, lattice, driver)[0][0] >= 0.9


def test_divergent_picard_reports_stage():
    lattice = build(2, JumpGrid.empty(), 1.0, MODE_MARKOV)
    stiff = FunctionDriver(lambda t, y, z, u: -20.0 * y, depends_on_y=True, label="stiff")
    with scoped(subcommand="validate", stage=2, m_level=4):
        with pytest.raises(ConvergenceError) as err:
            solve(lattice, stiff, np.ones(3), max_iter=20)
    assert err.value.stage == 2
    assert err.value.details["m_level"] == 4
    assert err.value.details["subcommand"] == "validate"
    assert err.value.node_id.startswith("1:")
    assert err.value.exit_code == 3


def test_no_steps_returns_terminal():
    lattice = build(0, JumpGrid.empty(), 1.0)
    sol = solve(lattice, zero_driver(), np.array([1.25]))
    assert sol.Y0 == 1.25
    assert sol.Z == [] and sol.U == []


def test_terminal_shape_is_checked():
    lattice = build(2, JumpGrid.empty(), 1.0)
    with pytest.raises(ShapeError):
        solve(lattice, zero_driver(), np.zeros(3))
    with pytest.raises(ShapeError):
        solve(lattice, zero_driver(), np.array([0.0, 1.0, np.inf, 0.0]))


def test_frame_layout(jump_market):
    lattice = build(2, jump_market.grid, jump_market.T)
    sol = BsdeSolution.zeros(lattice, generator="zero")
    frame = sol.to_frame()
    assert list(frame.columns) == ["time_index", "node_id", "t", "Y", "Z", "U_1", "U_2"]
    assert len(frame) == 1 + 6 + 36
    assert frame["Z"].isna().sum() == 36


def test_combine_is_slicewise(jump_market):
    lattice = build(2, jump_market.grid, jump_market.T)
    B = terminal_liability({"kind": "call", "strike": 1.0}, lattice.price_levels(jump_market)[-1])
    sol = solve(lattice, zero_driver(), B)
    diff = sol.combine(sol, sign=-1.0)
    assert diff.sup_abs_Y == 0.0


def test_apriori_report_on_merton(merton_market):
    lattice = build(8, merton_market.grid, merton_market.T, MODE_MARKOV)
    sol = solve(lattice, GeneratorSpec(merton_market), np.zeros(lattice.level_size(8)))
    report = check_apriori(sol, 0.0, merton_market)
    assert report.passed
    assert report.C1 == pytest.approx(-0.02)
    assert report.C2 == 0.0


def test_apriori_jump_checks(jump_market):
    lattice = build(3, jump_market.grid, jump_market.T)
    B = terminal_liability({"kind": "call", "strike": 1.0, "cap": 0.2}, lattice.price_levels(jump_market)[-1])
    sol = solve(lattice, GeneratorSpec(jump_market), B)
    report = check_apriori(sol, float(np.max(np.abs(B))), jump_market)
    by_name = {c.name: c for c in report.checks}
    assert by_name["jump_sup_bound"].passed
    assert by_name["equivalence_sandwich"].passed


def test_girsanov_weight_without_gamma():
    lattice = build(2, JumpGrid([0.5], [1.0]), 1.0)
    assert girsanov_min_weight(lattice, [np.zeros((1, 1)), np.zeros((4, 1))]) == 1.0
    # gamma = -0.5 on the single atom: weight 1 - 0.5 (1 - dt) on the jump branch
    weight = girsanov_min_weight(lattice, [np.full((1, 1), -0.5)])
    assert weight == pytest.approx(1.0 - 0.5 * (1.0 - 0.5))
