"""
Golden-section search over a batch of independent intervals.

Every node of a lattice slice carries its own inner minimization over the constraint set.
The search below runs all of them at once: `objective` receives one trial point per interval
and returns one value per interval.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Tuple

import numpy as np

INV_PHI = (math.sqrt(5) - 1) / 2  # 1 / phi
INV_PHI_SQUARE = (3 - math.sqrt(5)) / 2  # 1 / phi^2

BatchObjective = Callable[[np.ndarray], np.ndarray]


def required_iterations(width: float, tol: float) -> int:
    """Steps needed to shrink a bracket of `width` below `tol`."""
    if width <= tol:
        return 0
    return int(math.ceil(math.log(tol / width) / math.log(INV_PHI)))


def golden_section_batch(
    objective: BatchObjective,
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float,
    seeds: Optional[Iterable[np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Minimize a unimodal objective on [lo_k, hi_k] for every k simultaneously.

    The final bracket midpoint competes with the interval endpoints and any supplied seed
    points; the best candidate wins. Endpoints matter because the minimum of a convex
    objective on a compact interval is frequently attained on the boundary.

    Returns:
        (argmin, minimum) arrays of the broadcast shape of lo/hi.
    """
    a = np.asarray(lo, dtype=float)
    b = np.asarray(hi, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    a = a.astype(float).copy()
    b = b.astype(float).copy()
    lo0, hi0 = a.copy(), b.copy()

    h = b - a
    n_iter = required_iterations(float(h.max()) if h.size else 0.0, tol)

    if n_iter > 0:
        c = a + INV_PHI_SQUARE * h
        d = a + INV_PHI * h
        yc = objective(c)
        yd = objective(d)
        for _ in range(n_iter - 1):
            left = yc < yd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            h = INV_PHI * h
            trial = np.where(left, a + INV_PHI_SQUARE * h, a + INV_PHI * h)
            fp = objective(trial)
            c, d = np.where(left, trial, d), np.where(left, c, trial)
            yc, yd = np.where(left, fp, yd), np.where(left, yc, fp)
        a = np.where(yc < yd, a, c)
        b = np.where(yc < yd, d, b)

    best_x = 0.5 * (a + b)
    best_f = objective(best_x)

    candidates = [lo0, hi0]
    if seeds is not None:
        candidates.extend(np.clip(np.broadcast_to(s, lo0.shape), lo0, hi0) for s in seeds)
    for x in candidates:
        fx = objective(x)
        better = fx < best_f
        best_x = np.where(better, x, best_x)
        best_f = np.where(better, fx, best_f)

    return best_x, best_f


def golden_section(
    objective: Callable[[float], float], lo: float, hi: float, tol: float
) -> Tuple[float, float]:
    """Scalar convenience wrapper around golden_section_batch."""

    def batched(p: np.ndarray) -> np.ndarray:
        return np.array([objective(float(v)) for v in np.ravel(p)]).reshape(np.shape(p))

    x, fx = golden_section_batch(batched, np.array([lo]), np.array([hi]), tol)
    return float(x[0]), float(fx[0])
