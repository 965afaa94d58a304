"""
Quadratic generator family of the exponential-utility BSDE.

    f(t, z, u) = inf_{pi in C} [ (alpha/2) |pi sigma_t - (z + theta_t/alpha)|^2 + |u - pi beta_t|_alpha ]
                 - theta_t z - theta_t^2 / (2 alpha)

plus its shifted form f~, the Lipschitz truncations f^m, the recentred f^{1,m}, the
re-anchored cascade generators f^{k,m}, the u-increment process gamma and the z-slope.

All evaluations are vectorized: z has shape (n,) (or scalar) and u has shape (n, J) (or (J,)).
"""
from __future__ import annotations

import logging
import math
from enum import Enum
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app.controllers.levy_measure import (
    check_aligned,
    g_alpha,
    g_alpha_prime,
    smoothstep,
    truncated_weights,
)
from app.controllers.market import ConstraintSet, MarketSpec, theta
from app.controllers.utils.golden_section import golden_section, golden_section_batch
from app.core.config import settings
from app.core.exceptions import ConfigurationError, ParameterError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]

# Below this segment length the difference quotient of g_alpha is replaced by g_alpha' at the midpoint
_DQ_DEGENERATE = 1e-8


class GeneratorKind(str, Enum):
    F = "F"
    F_TILDE = "F_TILDE"
    F_M = "F_M"
    F_1M = "F_1M"
    F_KM = "F_KM"


class GeneratorValue(NamedTuple):
    value: Union[float, np.ndarray]
    pi_star: Union[float, np.ndarray]


class GeneratorSpec:
    """
    One member of the generator family, bound to a market.

    `m=None` means no truncation (the quadratic term and the jump measure are left intact).
    F_KM generators carry anchors (Z_bar^{k-1,m}, U_bar^{k-1,m}): either arrays aligned with
    the evaluation points or per-level lists sampled on a lattice.

    Instances are callable as lattice drivers: driver(level, t, y, z, u) -> f values.
    """

    depends_on_y = False

    def __init__(
        self,
        market: MarketSpec,
        kind: GeneratorKind = GeneratorKind.F,
        m: Optional[int] = None,
        M_cap: Optional[float] = None,
        anchor_z: Optional[Union[np.ndarray, List[np.ndarray]]] = None,
        anchor_u: Optional[Union[np.ndarray, List[np.ndarray]]] = None,
        k: int = 1,
        tol: Optional[float] = None,
    ):
        self.market = market
        self.kind = GeneratorKind(kind)
        if m is not None and (int(m) != m or m < 1):
            raise ParameterError(f"Truncation level must be a positive integer, got {m}")
        self.m = None if m is None else int(m)
        if M_cap is not None and not M_cap >= 0:
            raise ParameterError(f"M_cap must be nonnegative, got {M_cap}")
        self.M_cap = M_cap
        self.anchor_z = anchor_z
        self.anchor_u = anchor_u
        self.k = int(k)
        self.tol = settings.MINIMIZE_TOL if tol is None else float(tol)
        if self.tol <= 0:
            raise ParameterError(f"Minimization tolerance must be positive, got {self.tol}")
        if self.kind == GeneratorKind.F_KM and (anchor_z is None or anchor_u is None):
            raise ConfigurationError(f"Generator F_KM (k={self.k}) requires anchor processes")

    @property
    def label(self) -> str:
        if self.kind in (GeneratorKind.F, GeneratorKind.F_TILDE):
            return self.kind.value
        level = "inf" if self.m is None else str(self.m)
        if self.kind == GeneratorKind.F_KM:
            return f"F_KM(k={self.k},m={level})"
        return f"{self.kind.value}(m={level})"

    def anchors(self, level: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        if self.anchor_z is None or self.anchor_u is None:
            raise ConfigurationError(f"{self.label}: anchors missing")
        if isinstance(self.anchor_z, list):
            if level is None:
                raise ConfigurationError(f"{self.label}: lattice anchors need a time level")
            return self.anchor_z[level], self.anchor_u[level]
        return np.asarray(self.anchor_z, dtype=float), np.asarray(self.anchor_u, dtype=float)

    def evaluate(self, t: float, z: ArrayLike, u: Optional[ArrayLike] = None, level: Optional[int] = None):
        kind = self.kind
        if kind == GeneratorKind.F:
            return f_eval(self, t, z, u).value
        if kind == GeneratorKind.F_TILDE:
            return f_tilde_eval(self, t, z, u)
        if kind == GeneratorKind.F_M:
            return f_m_eval(self, t, z, u)
        if kind == GeneratorKind.F_1M:
            return f_1m_eval(self, t, z, u)
        a_z, a_u = self.anchors(level)
        return f_km_eval(self, t, z, u, anchor_z=a_z, anchor_u=a_u)

    def __call__(self, level: int, t: float, y: np.ndarray, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.evaluate(t, z, u, level=level), dtype=float)

    def with_anchors(self, anchor_z, anchor_u, k: int) -> "GeneratorSpec":
        return GeneratorSpec(
            self.market, GeneratorKind.F_KM, m=self.m, M_cap=self.M_cap,
            anchor_z=anchor_z, anchor_u=anchor_u, k=k, tol=self.tol,
        )

    def __repr__(self) -> str:
        return f"GeneratorSpec({self.label}, M_cap={self.M_cap})"


def _unpack(spec: Union[GeneratorSpec, MarketSpec]) -> Tuple[MarketSpec, Optional[int], Optional[float], float]:
    if isinstance(spec, GeneratorSpec):
        return spec.market, spec.m, spec.M_cap, spec.tol
    return spec, None, None, settings.MINIMIZE_TOL


def _rows(arr: np.ndarray, shape: Tuple[int, ...], J: int) -> np.ndarray:
    # explicit row count: reshape(-1, 0) is ambiguous when there are no jump atoms
    return np.broadcast_to(arr, shape + (J,)).reshape(math.prod(shape), J)


def _broadcast(market: MarketSpec, z: ArrayLike, u: Optional[ArrayLike]):
    J = market.grid.size
    z_arr = np.asarray(z, dtype=float)
    if u is None:
        u_arr = np.zeros(z_arr.shape + (J,))
    else:
        u_arr = check_aligned(u, market.grid.w)
    shape = np.broadcast_shapes(z_arr.shape, u_arr.shape[:-1])
    zb = np.broadcast_to(z_arr, shape).reshape(-1)
    ub = _rows(u_arr, shape, J)
    return zb, ub, shape


def _finish(arr: np.ndarray, shape: Tuple[int, ...]):
    out = arr.reshape(shape)
    return float(out) if out.ndim == 0 else out


def rho(m: Optional[int], z: ArrayLike) -> np.ndarray:
    """Truncation function rho_m (C^1 cubic smoothstep)."""
    return smoothstep(m, z)


def inner_objective(
    market: MarketSpec,
    t: float,
    pi: ArrayLike,
    z: ArrayLike,
    u: Optional[ArrayLike] = None,
    m: Optional[int] = None,
    M_cap: Optional[float] = None,
) -> Union[float, np.ndarray]:
    """
    (alpha/2) |pi sigma - (z + theta/alpha)|^2 rho_m(z) + sum_j w^m_j g_alpha(u_j - pi beta_j) rho_M(u_j)

    pi, z and the leading axes of u broadcast together.
    """
    J = market.grid.size
    pi_arr = np.asarray(pi, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    u_arr = np.zeros(z_arr.shape + (J,)) if u is None else check_aligned(u, market.grid.w)
    shape = np.broadcast_shapes(pi_arr.shape, z_arr.shape, u_arr.shape[:-1])
    pb = np.broadcast_to(pi_arr, shape).reshape(-1)
    zb = np.broadcast_to(z_arr, shape).reshape(-1)
    ub = _rows(u_arr, shape, J)
    return _finish(_objective(market, t, pb, zb, ub, m, M_cap), shape)


def _objective(
    market: MarketSpec,
    t: float,
    pi: np.ndarray,
    z: np.ndarray,
    u: np.ndarray,
    m: Optional[int],
    M_cap: Optional[float],
) -> np.ndarray:
    alpha = market.alpha
    th = theta(market, t)
    sig = market.sigma(t)
    q = rho(m, z)
    quad = 0.5 * alpha * (pi * sig - (z + th / alpha)) ** 2 * q
    if market.grid.size == 0:
        return quad
    omega = truncated_weights(market.grid, m)[None, :] * _cap(u, M_cap)
    beta = market.beta_at(t)
    jump = np.sum(omega * np.asarray(g_alpha(alpha, u - pi[:, None] * beta[None, :])), axis=1)
    return quad + jump


def _cap(u: np.ndarray, M_cap: Optional[float]) -> np.ndarray:
    if M_cap is None:
        return np.ones_like(u)
    return smoothstep(M_cap, u)


def _minimize_nodes(
    market: MarketSpec,
    t: float,
    z: np.ndarray,
    u: np.ndarray,
    m: Optional[int],
    M_cap: Optional[float],
    tol: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node infimum over C of the inner objective; returns (inf, argmin)."""
    C = market.constraint
    alpha = market.alpha
    th = theta(market, t)
    sig = market.sigma(t)
    q = rho(m, z)
    # Unconstrained argmin of the quadratic part, projected onto C (0 when the quadratic is switched off)
    quad_star = np.where(q > 0, np.clip((z + th / alpha) / sig, C.lo, C.hi), 0.0)

    pi_star = quad_star.copy()
    if market.grid.size:
        beta = market.beta_at(t)
        omega = truncated_weights(market.grid, m)[None, :] * _cap(u, M_cap)
        needs_search = np.any((omega > 0) & (beta[None, :] != 0.0), axis=1)
    else:
        needs_search = np.zeros(z.shape, dtype=bool)

    if np.any(needs_search) and C.hi > C.lo:
        idx = np.flatnonzero(needs_search)
        z_s, u_s = z[idx], u[idx]

        def batch(p: np.ndarray) -> np.ndarray:
            return _objective(market, t, p, z_s, u_s, m, M_cap)

        lo = np.full(idx.size, C.lo)
        hi = np.full(idx.size, C.hi)
        found, _ = golden_section_batch(batch, lo, hi, tol, seeds=[quad_star[idx], np.zeros(idx.size)])
        pi_star[idx] = found

    value = _objective(market, t, pi_star, z, u, m, M_cap)
    return value, pi_star


def _generator(
    market: MarketSpec,
    t: float,
    z: np.ndarray,
    u: np.ndarray,
    m: Optional[int],
    M_cap: Optional[float],
    tol: float,
) -> Tuple[np.ndarray, np.ndarray]:
    alpha = market.alpha
    th = theta(market, t)
    inf_val, pi_star = _minimize_nodes(market, t, z, u, m, M_cap, tol)
    return inf_val - th * z - th * th / (2.0 * alpha), pi_star


def f_eval(spec: Union[GeneratorSpec, MarketSpec], t: float, z: ArrayLike, u: Optional[ArrayLike] = None) -> GeneratorValue:
    """Untruncated generator f and its minimizing position."""
    market, _, _, tol = _unpack(spec)
    zb, ub, shape = _broadcast(market, z, u)
    value, pi_star = _generator(market, t, zb, ub, None, None, tol)
    return GeneratorValue(_finish(value, shape), _finish(pi_star, shape))


def baseline(spec: Union[GeneratorSpec, MarketSpec], t: float) -> float:
    """f(t, -theta_t/alpha, 0), evaluated from the generator rather than in closed form."""
    market, _, _, tol = _unpack(spec)
    zb, ub, _ = _broadcast(market, -theta(market, t) / market.alpha, None)
    value, _ = _generator(market, t, zb, ub, None, None, tol)
    return float(value[0])


def f_tilde_eval(spec: Union[GeneratorSpec, MarketSpec], t: float, z: ArrayLike, u: Optional[ArrayLike] = None):
    """f~(t, z, u) = f(t, z - theta/alpha, u) - f(t, -theta/alpha, 0)."""
    market, _, _, tol = _unpack(spec)
    th = theta(market, t)
    zb, ub, shape = _broadcast(market, z, u)
    value, _ = _generator(market, t, zb - th / market.alpha, ub, None, None, tol)
    return _finish(value - baseline(spec, t), shape)


def f_m_eval(spec: GeneratorSpec, t: float, z: ArrayLike, u: Optional[ArrayLike] = None, m: Optional[int] = None):
    """Truncated generator f^m: rho_m on the quadratic term, n^m and rho_M on the jump term."""
    market, spec_m, M_cap, tol = _unpack(spec)
    level = spec_m if m is None else m
    zb, ub, shape = _broadcast(market, z, u)
    value, _ = _generator(market, t, zb, ub, level, M_cap if level is not None else None, tol)
    return _finish(value, shape)


def _f_m_pi(spec: GeneratorSpec, t: float, z: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    market, m, M_cap, tol = _unpack(spec)
    return _generator(market, t, z, u, m, M_cap if m is not None else None, tol)


def f_1m_eval(spec: GeneratorSpec, t: float, z: ArrayLike, u: Optional[ArrayLike] = None):
    """f^{1,m}(t, z, u) = f^m(t, z - theta/alpha, u) - f(t, -theta/alpha, 0)."""
    market = spec.market if isinstance(spec, GeneratorSpec) else spec
    th = theta(market, t)
    zb, ub, shape = _broadcast(market, z, u)
    value, _ = _f_m_pi(spec, t, zb - th / market.alpha, ub)
    return _finish(value - baseline(spec, t), shape)


def f_km_eval(
    spec: GeneratorSpec,
    t: float,
    z: ArrayLike,
    u: Optional[ArrayLike] = None,
    anchor_z: Optional[ArrayLike] = None,
    anchor_u: Optional[ArrayLike] = None,
):
    """
    f^{k,m}(t, z, u) = f^m(t, z + Z_bar - theta/alpha, u + U_bar) - f^m(t, Z_bar - theta/alpha, U_bar).

    Anchors default to the ones carried by `spec`; both must be present.
    """
    if anchor_z is None or anchor_u is None:
        if not isinstance(spec, GeneratorSpec) or spec.anchor_z is None or spec.anchor_u is None:
            raise ConfigurationError("f^{k,m} needs anchor processes (Z_bar, U_bar) from the previous stage")
        anchor_z, anchor_u = spec.anchors()
    market = spec.market if isinstance(spec, GeneratorSpec) else spec
    th = theta(market, t)
    zb, ub, shape = _broadcast(market, z, u)
    a_z = np.broadcast_to(np.asarray(anchor_z, dtype=float), shape).reshape(-1)
    a_u = _rows(check_aligned(anchor_u, market.grid.w), shape, market.grid.size)
    shift = th / market.alpha
    moved, _ = _f_m_pi(spec, t, (zb + a_z) - shift, ub + a_u)
    anchored, _ = _f_m_pi(spec, t, a_z - shift, a_u)
    return _finish(moved - anchored, shape)


def gamma_eval(spec: Union[GeneratorSpec, MarketSpec], t: float, u: ArrayLike, u_prime: ArrayLike) -> np.ndarray:
    """
    Per-atom increment process gamma_t(u, u')(x_j).

    The difference quotient (g(a) - g(b)) / (a - b) with a = u - pi beta, b = u' - pi beta is the
    mean of the increasing function g' over [b, a], hence monotone in pi beta: its sup (u >= u')
    or inf (u < u') over the interval C is attained at pi = lo or pi = hi.
    """
    market, _, _, _ = _unpack(spec)
    w = market.grid.w
    u_arr = check_aligned(u, w)
    up_arr = check_aligned(u_prime, w)
    u_arr, up_arr = np.broadcast_arrays(u_arr, up_arr)
    beta = market.beta_at(t)
    C = market.constraint
    quotients = [_difference_quotient(market.alpha, u_arr - pi * beta, up_arr - pi * beta) for pi in (C.lo, C.hi)]
    return np.where(u_arr >= up_arr, np.maximum(*quotients), np.minimum(*quotients))


def _difference_quotient(alpha: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    degenerate = np.abs(diff) < _DQ_DEGENERATE
    safe = np.where(degenerate, 1.0, diff)
    quotient = (np.asarray(g_alpha(alpha, a)) - np.asarray(g_alpha(alpha, b))) / safe
    return np.where(degenerate, np.asarray(g_alpha_prime(alpha, 0.5 * (a + b))), quotient)


def gamma_bounds(spec: Union[GeneratorSpec, MarketSpec], K: float) -> Tuple[float, float]:
    """(-1 + delta_K, C_bar_K) for integrands bounded by K."""
    market, _, _, _ = _unpack(spec)
    reach = market.alpha * (K + market.constraint.max_abs * market.max_abs_beta())
    return -1.0 + float(np.exp(-reach)), float(np.expm1(reach))


def lambda_slope(spec: Union[GeneratorSpec, MarketSpec], t: float, z: ArrayLike, z_prime: ArrayLike, u: Optional[ArrayLike] = None):
    """(f(z, u) - f(z', u)) / (z - z'), zero where z == z'."""
    z_arr = np.asarray(z, dtype=float)
    zp_arr = np.asarray(z_prime, dtype=float)
    fz = np.asarray(f_eval(spec, t, z_arr, u).value)
    fzp = np.asarray(f_eval(spec, t, zp_arr, u).value)
    diff = z_arr - zp_arr
    same = diff == 0.0
    out = np.where(same, 0.0, (fz - fzp) / np.where(same, 1.0, diff))
    return float(out) if out.ndim == 0 else out


def lambda_envelope(spec: Union[GeneratorSpec, MarketSpec], t: float, z: ArrayLike, z_prime: ArrayLike):
    """kappa_t + alpha (|z| + |z'|), kappa_t = alpha max|pi| |sigma_t| + 2 |theta_t|."""
    market, _, _, _ = _unpack(spec)
    kappa = market.alpha * market.constraint.max_abs * abs(market.sigma(t)) + 2.0 * abs(theta(market, t))
    out = kappa + market.alpha * (np.abs(np.asarray(z, dtype=float)) + np.abs(np.asarray(z_prime, dtype=float)))
    return float(out) if np.ndim(out) == 0 else out


def minimize_over_C(objective: Callable[[float], float], C: ConstraintSet, tol: float) -> Tuple[float, float]:
    """Golden-section minimization of a convex scalar objective on [lo, hi]."""
    if not tol > 0:
        raise ParameterError(f"Minimization tolerance must be positive, got {tol}")
    return golden_section(objective, C.lo, C.hi, tol)


def minimize_batch(
    objective: Callable[[np.ndarray], np.ndarray],
    lo: ArrayLike,
    hi: ArrayLike,
    tol: float,
    seeds: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    if not tol > 0:
        raise ParameterError(f"Minimization tolerance must be positive, got {tol}")
    return golden_section_batch(objective, np.asarray(lo, dtype=float), np.asarray(hi, dtype=float), tol, seeds)


def apriori_constants(market: MarketSpec, M_B: float, times: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
    """
    Bounds C1 <= Y <= C2 for the recentred (f~-type) generators, and the jump cap M.

    C2 = M_B + T max theta^2 / alpha, C1 = -2 exp(T max theta^2 / 2) M_B, M = 2(|C1| + |C2|).
    """
    th2 = market.max_abs_theta(times) ** 2
    C2 = M_B + market.T * th2 / market.alpha
    C1 = -2.0 * float(np.exp(market.T * th2 / 2.0)) * M_B
    return C1, C2, 2.0 * (abs(C1) + abs(C2))


def h1_constants(market: MarketSpec, M_B: float, times: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Bounds for generators squeezed between -theta z - theta^2/(2 alpha) and (alpha/2) z^2 + |u|_alpha."""
    th2 = market.max_abs_theta(times) ** 2
    return -M_B - market.T * th2 / (2.0 * market.alpha), M_B
