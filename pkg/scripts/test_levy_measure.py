import math

import numpy as np
import pytest

from app.controllers.levy_measure import (
    JumpGrid,
    complement,
    equivalence_constant,
    exhausting_level,
    g_alpha,
    g_alpha_prime,
    l2_norm_sq,
    linf_norm,
    smoothstep,
    truncate,
    truncated_weights,
    u_alpha_norm,
)
from app.core.exceptions import ParameterError, ShapeError


# ============ JumpGrid ============

def test_grid_rejects_bad_atoms():
    with pytest.raises(ParameterError):
        JumpGrid([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ParameterError):
        JumpGrid([1.0], [-0.1])
    with pytest.raises(ShapeError):
        JumpGrid([1.0, 2.0], [1.0])


def test_grid_wire_format():
    atoms = [{"x": -0.5, "w": 0.6}, {"x": 0.3, "w": 0.4}]
    grid = JumpGrid.from_json(atoms)
    assert grid.size == 2
    assert grid.total_mass == pytest.approx(1.0)
    assert grid.to_json() == atoms
    assert JumpGrid.from_json(grid.to_json()) == grid


def test_grid_arrays_are_read_only():
    grid = JumpGrid([1.0], [2.0])
    with pytest.raises(ValueError):
        grid.w[0] = 3.0


# ============ g_alpha ============

def test_g_alpha_zero_and_sign():
    assert g_alpha(1.0, 0.0) == 0.0
    ys = np.linspace(-5, 5, 101)
    assert np.all(np.asarray(g_alpha(0.7, ys)) >= 0.0)


def test_g_alpha_small_argument_matches_series():
    for y in (1e-4, -1e-4, 5e-4):
        expected = y * y / 2 + y ** 3 / 6 + y ** 4 / 24
        assert g_alpha(1.0, y) == pytest.approx(expected, rel=1e-10)


def test_g_alpha_continuous_across_series_cutoff():
    below = g_alpha(1.0, 0.999e-3)
    above = g_alpha(1.0, 1.001e-3)
    assert above > below
    assert above - below == pytest.approx(g_alpha_prime(1.0, 1e-3) * 2e-6, rel=1e-3)


def test_g_alpha_closed_form():
    assert g_alpha(2.0, 1.0) == pytest.approx((math.exp(2.0) - 3.0) / 2.0, rel=1e-14)


def test_g_alpha_is_convex():
    ys = np.linspace(-3, 3, 61)
    vals = np.asarray(g_alpha(1.3, ys))
    assert np.all(np.diff(vals, 2) >= -1e-12)


def test_g_alpha_guards():
    with pytest.raises(ParameterError):
        g_alpha(0.0, 1.0)
    with pytest.raises(ParameterError):
        g_alpha(1.0, 701.0)


# ============ norms ============

def test_u_alpha_norm_reduces_last_axis():
    grid = JumpGrid([-0.5, 0.3], [0.6, 0.4])
    u = np.array([[0.0, 0.0], [1.0, -1.0]])
    out = np.asarray(u_alpha_norm(1.0, u, grid))
    assert out.shape == (2,)
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.6 * (math.e - 2.0) + 0.4 * math.exp(-1.0))


def test_norms_reject_misaligned_integrands():
    grid = JumpGrid([1.0, 2.0], [1.0, 1.0])
    with pytest.raises(ShapeError):
        u_alpha_norm(1.0, np.zeros(3), grid)


def test_l2_and_linf():
    grid = JumpGrid([1.0, 2.0, 3.0], [0.5, 0.0, 2.0])
    u = np.array([1.0, 10.0, -2.0])
    assert l2_norm_sq(u, grid) == pytest.approx(0.5 + 8.0)
    # the uncharged atom is ignored
    assert linf_norm(u, grid) == 2.0
    assert linf_norm(np.zeros((4, 0)), JumpGrid.empty()).tolist() == [0.0] * 4


# ============ truncation ============

def test_truncate_and_complement_split_the_grid():
    grid = JumpGrid([0.05, -0.5, 2.0], [1.0, 2.0, 3.0])
    assert truncate(grid, 1).x.tolist() == [2.0]
    assert truncate(grid, 2).x.tolist() == [-0.5, 2.0]
    assert complement(grid, 2).x.tolist() == [0.05]
    assert exhausting_level(grid) == 20
    assert truncate(grid, exhausting_level(grid)) == grid


def test_truncation_is_additive(rng):
    grid = JumpGrid([0.05, -0.5, 2.0], [1.0, 2.0, 3.0])
    u = rng.uniform(-1, 1, size=3)
    kept = np.abs(grid.x) >= 0.5
    total = u_alpha_norm(1.0, u, grid)
    parts = u_alpha_norm(1.0, u[kept], truncate(grid, 2)) + u_alpha_norm(1.0, u[~kept], complement(grid, 2))
    assert total == pytest.approx(parts, rel=1e-14)


def test_truncated_weights_are_aligned():
    grid = JumpGrid([0.05, -0.5, 2.0], [1.0, 2.0, 3.0])
    assert truncated_weights(grid, 2).tolist() == [0.0, 2.0, 3.0]
    assert truncated_weights(grid, None).tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ParameterError):
        truncated_weights(grid, 0)


def test_smoothstep_profile():
    assert smoothstep(1, 0.5) == 1.0
    assert smoothstep(1, -2.5) == 0.0
    assert smoothstep(1, 1.5) == pytest.approx(0.5)
    assert np.all(smoothstep(None, np.array([1e6, -3.0])) == 1.0)
    xs = np.linspace(0, 3, 301)
    assert np.all(np.diff(smoothstep(1, xs)) <= 0.0)


# ============ equivalence constant ============

def test_equivalence_constant_at_zero():
    assert equivalence_constant(2.0, 0.0) == pytest.approx(1.0)
    assert equivalence_constant(0.5, 0.0) == pytest.approx(4.0)


def test_equivalence_constant_covers_negative_jumps():
    # single atom of weight 1 at u = -1 with alpha = 1: |u|_alpha = 1/e while ||u||^2 = 1
    C = equivalence_constant(1.0, 1.0)
    assert C == pytest.approx(math.e)
    assert u_alpha_norm(1.0, np.array([-1.0]), np.array([1.0])) >= 1.0 / C - 1e-15


@pytest.mark.parametrize("alpha,K", [(1.0, 1.0), (0.5, 3.0), (2.0, 0.2)])
def test_equivalence_sandwich(alpha, K, rng):
    w = rng.uniform(0.1, 1.0, size=5)
    C = equivalence_constant(alpha, K)
    for _ in range(200):
        u = rng.uniform(-K, K, size=5)
        functional = u_alpha_norm(alpha, u, w)
        l2 = l2_norm_sq(u, w)
        assert l2 / C <= functional + 1e-12
        assert functional <= C * l2 + 1e-12
