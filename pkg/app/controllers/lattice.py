"""
Discrete noise for (W, Ñ_p): per step a binomial Brownian move ±sqrt(dt) crossed with
"no jump" or "jump of atom j" (probability w_j dt), so a node has K = 2 (1 + J) children.

Branch b = s * (1 + J) + j with s = 0 for +sqrt(dt), s = 1 for -sqrt(dt), and j = 0 for no
jump, j >= 1 for atom j - 1.

Two node layouts share the same `children` table:
  - tree:   node k at level i has children k*K + b (non-recombining, K^i nodes)
  - markov: nodes are branch-count vectors (recombining); valid when coefficients are
            constant in time and the terminal condition depends on the terminal state only
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.controllers.levy_measure import JumpGrid
from app.controllers.market import MarketSpec, check_step_size, step_return
from app.core.config import settings
from app.core.exceptions import ConfigurationError, ParameterError, ShapeError, StepSizeError

logger = logging.getLogger(__name__)

MODE_TREE = "tree"
MODE_MARKOV = "markov"

# Largest dt * total jump mass keeping the no-jump probability >= 1/2
MAX_JUMP_PROB = 0.5


class Lattice:
    def __init__(self, n_steps: int, grid: JumpGrid, T: float, mode: str = MODE_TREE):
        if int(n_steps) != n_steps or n_steps < 0:
            raise ParameterError(f"n_steps must be a nonnegative integer, got {n_steps}")
        if not T > 0:
            raise ParameterError(f"Horizon must be positive, got {T}")
        if mode not in (MODE_TREE, MODE_MARKOV):
            raise ConfigurationError(f"Unknown lattice mode {mode!r}", pointer="/lattice/mode")
        self.n_steps = int(n_steps)
        self.grid = grid
        self.T = float(T)
        self.mode = mode
        self.times = np.linspace(0.0, self.T, self.n_steps + 1)
        self.dt = self.T / self.n_steps if self.n_steps else self.T

        mass = grid.total_mass
        if self.n_steps and self.dt * mass > MAX_JUMP_PROB:
            raise StepSizeError(
                f"dt * jump mass = {self.dt * mass:.6g} exceeds {MAX_JUMP_PROB}",
                suggested_n_steps=int(math.ceil(self.T * mass / MAX_JUMP_PROB)),
            )

        J = grid.size
        self.n_jump_states = 1 + J
        self.K = 2 * self.n_jump_states
        branch = np.arange(self.K)
        sign = np.where(branch // self.n_jump_states == 0, 1.0, -1.0)
        self.dW = sign * math.sqrt(self.dt)
        self.jump_index = branch % self.n_jump_states - 1
        no_jump = 0.5 * (1.0 - self.dt * mass)
        atom_w = np.concatenate([[0.0], grid.w])
        self.probs = np.where(self.jump_index < 0, no_jump, 0.5 * atom_w[self.jump_index + 1] * self.dt)
        # jump indicators per branch: shape (K, J)
        self.indicators = (self.jump_index[:, None] == np.arange(J)[None, :]).astype(float)

        if mode == MODE_TREE:
            self._build_tree()
        else:
            self._build_markov()
        logger.debug(
            f"Lattice built: mode={mode}, n={self.n_steps}, K={self.K}, nodes={self.total_nodes}"
        )

    # ---------------------------------------------------------------- layouts
    def _build_tree(self) -> None:
        if self.n_steps > settings.MAX_TREE_STEPS:
            raise ConfigurationError(
                f"Full tree limited to {settings.MAX_TREE_STEPS} steps (got {self.n_steps}); "
                f"use lattice.mode='markov'",
                pointer="/lattice/n_steps",
            )
        total = sum(self.K ** i for i in range(self.n_steps + 1))
        if total > settings.MAX_TREE_NODES:
            raise ConfigurationError(
                f"Full tree would hold {total} nodes (> {settings.MAX_TREE_NODES}); "
                f"use lattice.mode='markov'",
                pointer="/lattice/n_steps",
            )
        self.children: List[np.ndarray] = [
            np.arange(self.K ** i)[:, None] * self.K + np.arange(self.K)[None, :]
            for i in range(self.n_steps)
        ]
        self.states: Optional[List[np.ndarray]] = None

    def _build_markov(self) -> None:
        states: List[np.ndarray] = [np.zeros((1, self.K), dtype=np.int64)]
        children: List[np.ndarray] = []
        eye = np.eye(self.K, dtype=np.int64)
        for _ in range(self.n_steps):
            current = states[-1]
            nxt = (current[:, None, :] + eye[None, :, :]).reshape(-1, self.K)
            unique, inverse = np.unique(nxt, axis=0, return_inverse=True)
            states.append(unique)
            children.append(np.asarray(inverse).reshape(current.shape[0], self.K))
        self.states = states
        self.children = children

    # ---------------------------------------------------------------- shape
    def level_size(self, level: int) -> int:
        if level == 0:
            return 1
        return int(self.children[level - 1].max()) + 1

    @property
    def total_nodes(self) -> int:
        return sum(self.level_size(i) for i in range(self.n_steps + 1))

    def node_ids(self, level: int) -> List[str]:
        if self.mode == MODE_MARKOV:
            return [f"{level}:" + "-".join(str(c) for c in row) for row in self.states[level]]
        ids = []
        for k in range(self.level_size(level)):
            digits = []
            rest = k
            for _ in range(level):
                rest, d = divmod(rest, self.K)
                digits.append(str(d))
            ids.append(f"{level}:" + ".".join(reversed(digits)))
        return ids

    def node_id(self, level: int, index: int) -> str:
        if self.mode == MODE_MARKOV:
            return f"{level}:" + "-".join(str(c) for c in self.states[level][index])
        digits = []
        rest = index
        for _ in range(level):
            rest, d = divmod(rest, self.K)
            digits.append(str(d))
        return f"{level}:" + ".".join(reversed(digits))

    # ---------------------------------------------------------------- slice algebra
    def gather(self, level: int, next_values: np.ndarray) -> np.ndarray:
        """Child values of every node at `level`: shape (n_level, K, ...)."""
        next_values = np.asarray(next_values, dtype=float)
        if next_values.shape[0] != self.level_size(level + 1):
            raise ShapeError(
                f"Level {level + 1} holds {self.level_size(level + 1)} nodes, got {next_values.shape[0]} values"
            )
        return next_values[self.children[level]]

    def expectation(self, level: int, next_values: np.ndarray) -> np.ndarray:
        return conditional_expectation(self, self.gather(level, next_values))

    def project(self, level: int, next_values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(E, Z, U) of the child values at every node of `level`."""
        child = self.gather(level, next_values)
        return (
            conditional_expectation(self, child),
            brownian_projection(self, child),
            jump_projection(self, child),
        )

    def node_probabilities(self, level: int) -> np.ndarray:
        prob = np.ones(1)
        for i in range(level):
            nxt = np.zeros(self.level_size(i + 1))
            np.add.at(nxt, self.children[i], prob[:, None] * self.probs[None, :])
            prob = nxt
        return prob

    def all_node_probabilities(self) -> List[np.ndarray]:
        out = [np.ones(1)]
        for i in range(self.n_steps):
            nxt = np.zeros(self.level_size(i + 1))
            np.add.at(nxt, self.children[i], out[-1][:, None] * self.probs[None, :])
            out.append(nxt)
        return out

    # ---------------------------------------------------------------- market on the lattice
    def returns(self, spec: MarketSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """One-step compensated returns, shape (n_steps, K)."""
        if self.mode == MODE_MARKOV and not spec.is_time_homogeneous:
            raise ConfigurationError(
                "Markov lattice mode needs time-constant coefficients", pointer="/lattice/mode"
            )
        if spec.grid.size != self.grid.size:
            raise ShapeError("Market jump grid does not match the lattice grid")
        check_step_size(spec, self.times[:-1], self.dt)
        return np.stack(
            [
                np.asarray(step_return(spec, float(t), self.dt, self.dW, self.jump_index, weights))
                for t in self.times[:-1]
            ]
        ) if self.n_steps else np.zeros((0, self.K))

    def price_levels(self, spec: MarketSpec) -> List[np.ndarray]:
        """S at every node, starting from spec.s0."""
        r = self.returns(spec)
        prices = [np.array([spec.s0])]
        for i in range(self.n_steps):
            nxt = np.empty(self.level_size(i + 1))
            nxt[self.children[i]] = prices[-1][:, None] * (1.0 + r[i][None, :])
            prices.append(nxt)
        return prices

    def __repr__(self) -> str:
        return f"Lattice(mode={self.mode}, n_steps={self.n_steps}, K={self.K}, dt={self.dt:.6g})"


def build(n_steps: int, grid_m: JumpGrid, T: float, mode: str = MODE_TREE) -> Lattice:
    return Lattice(n_steps, grid_m, T, mode)


def _check_children(lattice: Lattice, child_values: np.ndarray) -> np.ndarray:
    child_values = np.asarray(child_values, dtype=float)
    if child_values.ndim == 0 or child_values.shape[-1] != lattice.K:
        if child_values.ndim >= 2 and child_values.shape[1] == lattice.K:
            return np.moveaxis(child_values, 1, -1)
        raise ShapeError(f"Expected {lattice.K} child values per node")
    return child_values


def conditional_expectation(lattice: Lattice, child_values: np.ndarray) -> np.ndarray:
    """Probability-weighted child average; children on axis 1 (slice) or the last axis."""
    v = _check_children(lattice, child_values)
    return v @ lattice.probs


def brownian_projection(lattice: Lattice, child_values: np.ndarray) -> np.ndarray:
    """Z = E[V dW] / dt."""
    v = _check_children(lattice, child_values)
    return v @ (lattice.probs * lattice.dW) / lattice.dt


def jump_projection(lattice: Lattice, child_values: np.ndarray) -> np.ndarray:
    """U_j = mean over the two Brownian moves of V(jump j) - V(no jump); shape (..., J)."""
    v = _check_children(lattice, child_values)
    nj = lattice.n_jump_states
    up, down = v[..., :nj], v[..., nj:]
    return 0.5 * ((up[..., 1:] - up[..., :1]) + (down[..., 1:] - down[..., :1]))


def representation_residual(lattice: Lattice, child_values: np.ndarray) -> np.ndarray:
    """R = V - E - Z dW - sum_j U_j (1_j - w_j dt) per child."""
    v = _check_children(lattice, child_values)
    E = conditional_expectation(lattice, v)
    Z = brownian_projection(lattice, v)
    U = jump_projection(lattice, v)
    compensated = lattice.indicators - lattice.grid.w[None, :] * lattice.dt  # (K, J)
    jump_part = U @ compensated.T
    return v - E[..., None] - Z[..., None] * lattice.dW - jump_part


# ==================== PATH SAMPLING ====================

@dataclass(frozen=True)
class Path:
    dW: Tuple[float, ...]
    jumps: Tuple[Optional[int], ...]
    seed: int
    index: int


class PathBatch:
    """Branch labels of `count` i.i.d. paths, shape (count, n_steps)."""

    def __init__(self, lattice: Lattice, branches: np.ndarray, seed: int):
        self.lattice = lattice
        self.branches = branches
        self.seed = seed

    @property
    def count(self) -> int:
        return int(self.branches.shape[0])

    @property
    def dW(self) -> np.ndarray:
        return self.lattice.dW[self.branches]

    @property
    def jumps(self) -> np.ndarray:
        return self.lattice.jump_index[self.branches]

    def node_indices(self) -> np.ndarray:
        """Node index at every level along each path, shape (count, n_steps + 1)."""
        nodes = np.zeros((self.count, self.lattice.n_steps + 1), dtype=np.int64)
        for i in range(self.lattice.n_steps):
            nodes[:, i + 1] = self.lattice.children[i][nodes[:, i], self.branches[:, i]]
        return nodes

    def to_paths(self) -> List[Path]:
        dW = self.dW
        jumps = self.jumps
        return [
            Path(
                dW=tuple(float(x) for x in dW[p]),
                jumps=tuple(None if j < 0 else int(j) for j in jumps[p]),
                seed=self.seed,
                index=p,
            )
            for p in range(self.count)
        ]


def sample_branches(lattice: Lattice, count: int, seed: int, chunk_size: Optional[int] = None) -> PathBatch:
    """Chunks draw from child seeds of SeedSequence(seed), so output depends on (seed, count) only."""
    if int(count) != count or count < 1:
        raise ParameterError(f"Path count must be a positive integer, got {count}")
    chunk = int(chunk_size or settings.MC_CHUNK_SIZE)
    n_chunks = -(-count // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    parts = []
    remaining = count
    for child in children:
        size = min(chunk, remaining)
        rng = np.random.default_rng(child)
        parts.append(rng.choice(lattice.K, size=(size, lattice.n_steps), p=lattice.probs))
        remaining -= size
    branches = np.concatenate(parts, axis=0) if parts else np.zeros((0, lattice.n_steps), dtype=np.int64)
    return PathBatch(lattice, branches, seed)


def sample_paths(lattice: Lattice, count: int, seed: int) -> List[Path]:
    return sample_branches(lattice, count, seed).to_paths()
