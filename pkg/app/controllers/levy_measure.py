"""
Finite atomic Lévy measures and the exponential jump functional.

A JumpGrid stands in for n(dx): atoms x_j != 0 carrying intensity w_j per unit time.
Jump integrands u are plain numpy arrays whose LAST axis is aligned with the grid atoms,
so a whole lattice slice of integrands (shape (nodes, J)) is handled in one call.
"""
from __future__ import annotations

import math
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from app.core.exceptions import ParameterError, ShapeError

# Largest alpha * y accepted before exp overflows double precision
EXP_ARG_MAX = 700.0
# Below this |alpha * y| the Taylor series beats expm1(x) - x on cancellation
_SERIES_CUTOFF = 1e-3

UFunction = np.ndarray
ArrayLike = Union[float, Sequence[float], np.ndarray]


class JumpGrid:
    """Immutable atomic measure sum_j w_j * delta_{x_j}."""

    def __init__(self, x: ArrayLike, w: ArrayLike):
        x_arr = np.array(x, dtype=float).reshape(-1)
        w_arr = np.array(w, dtype=float).reshape(-1)
        if x_arr.shape != w_arr.shape:
            raise ShapeError(f"Jump sizes ({x_arr.size}) and weights ({w_arr.size}) differ in length")
        if not (np.all(np.isfinite(x_arr)) and np.all(np.isfinite(w_arr))):
            raise ParameterError("Jump grid atoms must be finite")
        if np.any(x_arr == 0.0):
            raise ParameterError("Jump grid cannot charge x = 0")
        if np.any(w_arr < 0.0):
            raise ParameterError("Jump grid weights must be nonnegative")
        x_arr.setflags(write=False)
        w_arr.setflags(write=False)
        self._x = x_arr
        self._w = w_arr

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def w(self) -> np.ndarray:
        return self._w

    @property
    def size(self) -> int:
        return int(self._x.size)

    def __len__(self) -> int:
        return self.size

    @property
    def total_mass(self) -> float:
        return float(self._w.sum())

    @property
    def small_jump_activity(self) -> float:
        """sum_j w_j (1 ∧ |x_j|)^2, finite for every atomic grid."""
        return float(np.sum(self._w * np.minimum(1.0, np.abs(self._x)) ** 2))

    @classmethod
    def empty(cls) -> "JumpGrid":
        return cls([], [])

    @classmethod
    def from_json(cls, atoms: List[Dict[str, Any]]) -> "JumpGrid":
        """Load the wire format: a JSON array of {"x": number, "w": number}."""
        try:
            xs = [float(a["x"]) for a in atoms]
            ws = [float(a["w"]) for a in atoms]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"Malformed jump atom list: {exc}") from exc
        return cls(xs, ws)

    def to_json(self) -> List[Dict[str, float]]:
        return [{"x": float(x), "w": float(w)} for x, w in zip(self._x, self._w)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, JumpGrid):
            return NotImplemented
        return np.array_equal(self._x, other._x) and np.array_equal(self._w, other._w)

    def __hash__(self) -> int:
        return hash((self._x.tobytes(), self._w.tobytes()))

    def __repr__(self) -> str:
        return f"JumpGrid(atoms={self.size}, mass={self.total_mass:.6g})"


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ParameterError(f"Risk aversion alpha must be positive, got {alpha}")


def check_aligned(u: ArrayLike, weights: np.ndarray) -> np.ndarray:
    u_arr = np.asarray(u, dtype=float)
    if u_arr.ndim == 0 or u_arr.shape[-1] != weights.shape[-1]:
        raise ShapeError(
            f"Jump integrand with trailing size {u_arr.shape[-1] if u_arr.ndim else 0} "
            f"does not match {weights.shape[-1]} atoms"
        )
    return u_arr


def _weights(grid_or_weights: Union[JumpGrid, np.ndarray]) -> np.ndarray:
    if isinstance(grid_or_weights, JumpGrid):
        return grid_or_weights.w
    return np.asarray(grid_or_weights, dtype=float)


def g_alpha(alpha: float, y: ArrayLike) -> Union[float, np.ndarray]:
    """g_alpha(y) = (exp(alpha y) - alpha y - 1) / alpha, nonnegative and convex."""
    _check_alpha(alpha)
    y_arr = np.asarray(y, dtype=float)
    s = alpha * y_arr
    if np.any(s > EXP_ARG_MAX):
        raise ParameterError(f"alpha * y exceeds {EXP_ARG_MAX}; exp would overflow")
    small = np.abs(s) < _SERIES_CUTOFF
    safe = np.where(small, 0.0, s)
    out = np.where(
        small,
        s * s * (0.5 + s * (1.0 / 6.0 + s * (1.0 / 24.0 + s / 120.0))),
        np.expm1(safe) - safe,
    ) / alpha
    return float(out) if out.ndim == 0 else out


def g_alpha_prime(alpha: float, y: ArrayLike) -> Union[float, np.ndarray]:
    _check_alpha(alpha)
    s = alpha * np.asarray(y, dtype=float)
    if np.any(s > EXP_ARG_MAX):
        raise ParameterError(f"alpha * y exceeds {EXP_ARG_MAX}; exp would overflow")
    out = np.expm1(s)
    return float(out) if out.ndim == 0 else out


def u_alpha_norm(alpha: float, u: ArrayLike, grid: Union[JumpGrid, np.ndarray]) -> Union[float, np.ndarray]:
    """|u|_alpha = sum_j w_j g_alpha(u_j), reduced over the atom axis."""
    w = _weights(grid)
    u_arr = check_aligned(u, w)
    out = np.sum(w * np.asarray(g_alpha(alpha, u_arr)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def l2_norm_sq(u: ArrayLike, grid: Union[JumpGrid, np.ndarray]) -> Union[float, np.ndarray]:
    w = _weights(grid)
    u_arr = check_aligned(u, w)
    out = np.sum(w * u_arr * u_arr, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def linf_norm(u: ArrayLike, grid: Union[JumpGrid, np.ndarray]) -> Union[float, np.ndarray]:
    """max_j |u_j| over charged atoms (w_j > 0); 0 for an empty grid."""
    w = _weights(grid)
    u_arr = check_aligned(u, w)
    if w.size == 0:
        out = np.zeros(u_arr.shape[:-1])
    else:
        out = np.max(np.where(w > 0, np.abs(u_arr), 0.0), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _check_level(m: int) -> None:
    if int(m) != m or m < 1:
        raise ParameterError(f"Truncation level must be a positive integer, got {m}")


def truncate(grid: JumpGrid, m: int) -> JumpGrid:
    """n^m: keep atoms with |x| >= 1/m, weights unchanged."""
    _check_level(m)
    keep = np.abs(grid.x) >= 1.0 / m
    return JumpGrid(grid.x[keep], grid.w[keep])


def complement(grid: JumpGrid, m: int) -> JumpGrid:
    """Atoms discarded by truncate(grid, m)."""
    _check_level(m)
    drop = np.abs(grid.x) < 1.0 / m
    return JumpGrid(grid.x[drop], grid.w[drop])


def truncated_weights(grid: JumpGrid, m: Optional[int]) -> np.ndarray:
    """Weights of n^m aligned index-for-index with the full grid (None = no truncation)."""
    if m is None:
        return grid.w
    _check_level(m)
    return np.where(np.abs(grid.x) >= 1.0 / m, grid.w, 0.0)


def exhausting_level(grid: JumpGrid) -> int:
    """Smallest m with truncate(grid, m) == grid."""
    if grid.size == 0:
        return 1
    return max(1, int(math.ceil(1.0 / float(np.min(np.abs(grid.x))))))


def smoothstep(level: Optional[float], x: ArrayLike) -> np.ndarray:
    """
    C^1 cut-off: 1 on |x| <= level, 0 on |x| >= level + 1, cubic 1 - 3s^2 + 2s^3 between.

    level=None disables the cut-off.
    """
    x_arr = np.abs(np.asarray(x, dtype=float))
    if level is None:
        return np.ones_like(x_arr)
    s = np.clip(x_arr - level, 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


def _phi(s: float) -> float:
    # (e^s - s - 1) / s^2, increasing in s, phi(0) = 1/2
    if s == 0.0:
        return 0.5
    return float(g_alpha(1.0, s)) / (s * s)


def equivalence_constant(alpha: float, K: float) -> float:
    """
    C(alpha, K) with (1/C) ||u||^2 <= |u|_alpha <= C ||u||^2 whenever |u|_inf <= K.

    g_alpha(y) / y^2 = alpha * phi(alpha y) is increasing in y, so on [-K, K] it lies between
    alpha * phi(-alpha K) and alpha * phi(alpha K).
    """
    _check_alpha(alpha)
    if K < 0:
        raise ParameterError(f"Sup bound K must be nonnegative, got {K}")
    upper = alpha * _phi(alpha * K)
    lower = alpha * _phi(-alpha * K)
    return max(upper, 1.0 / lower)
