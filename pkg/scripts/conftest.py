import json
import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.controllers.levy_measure import JumpGrid
from app.controllers.market import ConstraintSet, MarketSpec


@pytest.fixture
def merton_market() -> MarketSpec:
    """No jumps, theta = 0.2, alpha = 1, wide constraint."""
    return MarketSpec(0.2, 1.0, 0.0, JumpGrid.empty(), 1.0, 1.0, ConstraintSet(-10.0, 10.0))


@pytest.fixture
def zero_market() -> MarketSpec:
    return MarketSpec(0.0, 1.0, 0.0, JumpGrid.empty(), 2.0, 1.0, ConstraintSet(-1.0, 1.0))


@pytest.fixture
def jump_market() -> MarketSpec:
    """Two atoms, long-only constraint."""
    grid = JumpGrid([-0.5, 0.3], [0.6, 0.4])
    return MarketSpec(0.1, 0.3, [-0.15, 0.1], grid, 1.0, 1.0, ConstraintSet(0.0, 1.0), s0=1.0)


@pytest.fixture
def one_atom_market() -> MarketSpec:
    grid = JumpGrid([-0.5], [0.5])
    return MarketSpec(0.05, 0.5, -0.2, grid, 1.0, 1.0, ConstraintSet(0.0, 1.0), s0=1.0)


@pytest.fixture
def flat_jump_market() -> MarketSpec:
    """Jumps in the measure but beta == 0, so the jump term does not depend on pi."""
    grid = JumpGrid([-0.4, 0.2, 1.5], [0.3, 0.5, 0.2])
    return MarketSpec(0.15, 0.5, 0.0, grid, 1.5, 1.0, ConstraintSet(-2.0, 2.0))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict to a JSON file and return its path."""

    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)

    return _write


@pytest.fixture
def zero_config(tmp_path):
    return {
        "market": {
            "b": 0.0,
            "sigma": 1.0,
            "alpha": 2.0,
            "T": 1.0,
            "constraint": {"lo": -1.0, "hi": 1.0},
        },
        "lattice": {"n_steps": 4, "mode": "tree"},
        "terminal": {"kind": "constant", "value": 0.0},
        "mc": {"paths": 2000, "seed": 1},
        "output": {"dir": str(tmp_path / "out")},
        "optimize": {"x": 1.0, "random_strategies": 3},
        "validate": {"samples": 100, "comparison_pairs": 2, "truncation_levels": [1, 2], "seed": 5},
    }


@pytest.fixture
def merton_config(tmp_path):
    return {
        "market": {
            "b": 0.2,
            "sigma": 1.0,
            "alpha": 1.0,
            "T": 1.0,
            "constraint": {"lo": -10.0, "hi": 10.0},
        },
        "lattice": {"n_steps": 16, "mode": "markov"},
        "terminal": {"kind": "constant", "value": 0.0},
        "output": {"dir": str(tmp_path / "merton")},
    }
