"""
Market model: one risky asset with jumps, zero interest rate.

    dS_t / S_{t-} = b_t dt + sigma_t dW_t + integral beta_t(x) Ñ_p(dt, dx)

Coefficients are deterministic, piecewise constant in time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from app.controllers.levy_measure import JumpGrid
from app.core.exceptions import (
    AdmissibilityError,
    ParameterError,
    ShapeError,
    SingularCoefficientError,
    StepSizeError,
)

logger = logging.getLogger(__name__)

TimeLike = Union[float, np.ndarray]
JumpLike = Union[None, int, np.ndarray]

NO_JUMP = -1


class Coefficient:
    """Piecewise-constant function of time: values[i] on [breakpoints[i-1], breakpoints[i])."""

    def __init__(self, values: Sequence[float], breakpoints: Sequence[float] = ()):
        self.values = np.array(values, dtype=float).reshape(-1)
        self.breakpoints = np.array(breakpoints, dtype=float).reshape(-1)
        if self.values.size != self.breakpoints.size + 1:
            raise ShapeError(
                f"A table with {self.breakpoints.size} breakpoints needs "
                f"{self.breakpoints.size + 1} values, got {self.values.size}"
            )
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ParameterError("Coefficient breakpoints must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("Coefficient values must be finite (bounded coefficients)")

    @classmethod
    def constant(cls, value: float) -> "Coefficient":
        return cls([value])

    @classmethod
    def parse(cls, raw: Any) -> "Coefficient":
        """Accept a number or {"breakpoints": [...], "values": [...]}."""
        if isinstance(raw, Coefficient):
            return raw
        if isinstance(raw, (int, float)):
            return cls.constant(float(raw))
        if isinstance(raw, dict):
            return cls(raw.get("values", []), raw.get("breakpoints", []))
        raise ParameterError(f"Cannot read a coefficient from {raw!r}")

    @property
    def is_constant(self) -> bool:
        return self.values.size == 1 or bool(np.all(self.values == self.values[0]))

    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __call__(self, t: TimeLike) -> Union[float, np.ndarray]:
        idx = np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="right")
        out = self.values[idx]
        return float(out) if np.ndim(out) == 0 else out

    def to_json(self) -> Any:
        if self.breakpoints.size == 0:
            return float(self.values[0])
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}


@dataclass(frozen=True)
class ConstraintSet:
    """Compact interval [lo, hi] of admissible positions; must contain 0."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ParameterError("Constraint bounds must be finite")
        if self.lo > self.hi:
            raise ParameterError(f"Constraint lo={self.lo} exceeds hi={self.hi}")
        if not (self.lo <= 0.0 <= self.hi):
            raise ParameterError(f"Constraint [{self.lo}, {self.hi}] must contain 0")

    @property
    def max_abs(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def contains(self, pi: TimeLike, slack: float = 0.0) -> bool:
        p = np.asarray(pi, dtype=float)
        return bool(np.all((p >= self.lo - slack) & (p <= self.hi + slack)))

    def project(self, pi: TimeLike) -> Union[float, np.ndarray]:
        out = np.clip(pi, self.lo, self.hi)
        return float(out) if np.ndim(out) == 0 else out


class MarketSpec:
    """Coefficients b, sigma, beta (per atom), risk aversion alpha, horizon T, constraint C."""

    def __init__(
        self,
        b: Any,
        sigma: Any,
        beta: Any,
        grid: JumpGrid,
        alpha: float,
        T: float,
        constraint: ConstraintSet,
        s0: float = 100.0,
    ):
        if not alpha > 0:
            raise ParameterError(f"alpha must be positive, got {alpha}")
        if not T > 0:
            raise ParameterError(f"Horizon T must be positive, got {T}")
        if not s0 > 0:
            raise ParameterError(f"Initial price must be positive, got {s0}")
        self.b = Coefficient.parse(b)
        self.sigma = Coefficient.parse(sigma)
        if isinstance(beta, (list, tuple)):
            betas = [Coefficient.parse(v) for v in beta]
        else:
            betas = [Coefficient.parse(beta)] * grid.size
        if len(betas) != grid.size:
            raise ShapeError(f"beta lists {len(betas)} coefficients for {grid.size} jump atoms")
        self.beta: List[Coefficient] = betas
        self.grid = grid
        self.alpha = float(alpha)
        self.T = float(T)
        self.constraint = constraint
        self.s0 = float(s0)

    @property
    def is_time_homogeneous(self) -> bool:
        return self.b.is_constant and self.sigma.is_constant and all(c.is_constant for c in self.beta)

    def beta_at(self, t: TimeLike) -> np.ndarray:
        """beta_t(x_j); shape (J,) for scalar t, (len(t), J) for an array of times."""
        t_arr = np.asarray(t, dtype=float)
        if not self.beta:
            return np.zeros(t_arr.shape + (0,))
        return np.stack([np.asarray(c(t_arr), dtype=float) for c in self.beta], axis=-1)

    def max_abs_beta(self) -> float:
        return max((c.sup_abs() for c in self.beta), default=0.0)

    def validate_on(self, times: np.ndarray) -> None:
        """Check sigma != 0 and beta > -1 at every grid time."""
        times = np.asarray(times, dtype=float)
        sig = np.asarray(self.sigma(times))
        if np.any(sig == 0.0):
            bad = float(times[np.argmax(sig == 0.0)])
            raise SingularCoefficientError(f"sigma vanishes at t={bad}; theta is undefined")
        beta = self.beta_at(times)
        if beta.size and np.any(beta <= -1.0):
            raise ParameterError("beta must exceed -1 (price positivity)")

    def max_abs_theta(self, times: Optional[np.ndarray] = None) -> float:
        if times is None:
            times = np.concatenate([[0.0], self.b.breakpoints, self.sigma.breakpoints])
            times = times[times <= self.T]
        return float(np.max(np.abs(theta(self, times))))

    def __repr__(self) -> str:
        return (
            f"MarketSpec(alpha={self.alpha}, T={self.T}, atoms={self.grid.size}, "
            f"C=[{self.constraint.lo}, {self.constraint.hi}])"
        )


def theta(spec: MarketSpec, t: TimeLike) -> Union[float, np.ndarray]:
    """Market price of risk b_t / sigma_t."""
    sig = np.asarray(spec.sigma(t), dtype=float)
    if np.any(sig == 0.0):
        raise SingularCoefficientError("sigma vanishes; theta = b / sigma is undefined")
    out = np.asarray(spec.b(t), dtype=float) / sig
    return float(out) if np.ndim(out) == 0 else out


def step_return(
    spec: MarketSpec,
    t: float,
    dt: float,
    dW: TimeLike,
    jump: JumpLike = None,
    weights: Optional[np.ndarray] = None,
) -> Union[float, np.ndarray]:
    """
    Compensated one-step return b dt + sigma dW + beta_j 1{jump j} - dt sum_j w_j beta_j.

    `jump` is an atom index, None / -1 for no jump, or an integer array (vectorized).
    `weights` defaults to the full grid weights.
    """
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    w = spec.grid.w if weights is None else np.asarray(weights, dtype=float)
    beta_t = spec.beta_at(t)
    if w.shape != beta_t.shape:
        raise ShapeError("Compensator weights are not aligned with the jump grid")
    jump_idx = np.asarray(NO_JUMP if jump is None else jump, dtype=int)
    if np.any(jump_idx >= spec.grid.size) or np.any(jump_idx < NO_JUMP):
        raise ShapeError(f"Jump index out of range for {spec.grid.size} atoms")
    if spec.grid.size:
        jump_term = np.where(jump_idx >= 0, beta_t[np.clip(jump_idx, 0, None)], 0.0)
    else:
        jump_term = np.zeros(jump_idx.shape)
    compensator = dt * float(np.dot(w, beta_t))
    out = spec.b(t) * dt + spec.sigma(t) * np.asarray(dW, dtype=float) + jump_term - compensator
    return float(out) if np.ndim(out) == 0 else out


def step_price(
    spec: MarketSpec,
    s_prev: TimeLike,
    t: float,
    dt: float,
    dW: TimeLike,
    jump: JumpLike = None,
    weights: Optional[np.ndarray] = None,
) -> Union[float, np.ndarray]:
    if np.any(np.asarray(s_prev) <= 0):
        raise ParameterError("Price must be positive before the step")
    factor = 1.0 + np.asarray(step_return(spec, t, dt, dW, jump, weights))
    if np.any(factor <= 0.0):
        raise StepSizeError(
            f"Price update factor {float(np.min(factor)):.6g} <= 0 at t={t}; reduce dt={dt}"
        )
    out = np.asarray(s_prev, dtype=float) * factor
    return float(out) if np.ndim(out) == 0 else out


def step_wealth(
    spec: MarketSpec,
    x_prev: TimeLike,
    pi: TimeLike,
    t: float,
    dt: float,
    dW: TimeLike,
    jump: JumpLike = None,
    weights: Optional[np.ndarray] = None,
) -> Union[float, np.ndarray]:
    """Self-financing update X + pi * (dS / S_-), pi being the amount held in the stock."""
    if not spec.constraint.contains(pi, slack=1e-12):
        raise AdmissibilityError(
            f"Position outside C=[{spec.constraint.lo}, {spec.constraint.hi}]"
        )
    out = np.asarray(x_prev, dtype=float) + np.asarray(pi, dtype=float) * np.asarray(
        step_return(spec, t, dt, dW, jump, weights)
    )
    return float(out) if np.ndim(out) == 0 else out


def check_step_size(spec: MarketSpec, times: np.ndarray, dt: float) -> None:
    """
    Admissible dt: dt (|b| + mass * max|beta|) < 1 and every branch keeps the price factor positive.
    """
    mass = spec.grid.total_mass
    drift_bound = dt * (spec.b.sup_abs() + mass * spec.max_abs_beta())
    if drift_bound >= 1.0:
        suggested = int(np.ceil(spec.T * (spec.b.sup_abs() + mass * spec.max_abs_beta()) / 0.5))
        raise StepSizeError(
            f"dt={dt:.6g} too large: dt*(|b| + mass*max|beta|) = {drift_bound:.6g} >= 1",
            suggested_n_steps=max(suggested, 1),
        )
    sq = np.sqrt(dt)
    for t in np.asarray(times, dtype=float):
        for dW in (sq, -sq):
            jumps = np.arange(NO_JUMP, spec.grid.size)
            factor = 1.0 + np.asarray(step_return(spec, float(t), dt, dW, jumps))
            if np.any(factor <= 0.0):
                sig = max(spec.sigma.sup_abs(), 1e-12)
                suggested = int(np.ceil(spec.T * (2.0 * sig) ** 2))
                raise StepSizeError(
                    f"Brownian branch {dW:+.4g} makes the price factor nonpositive at t={t}",
                    suggested_n_steps=max(suggested, 1),
                )


def market_from_config(raw: Dict[str, Any]) -> MarketSpec:
    """MarketSpec from the `market` block of a run config (already schema-checked)."""
    constraint = raw["constraint"]
    return MarketSpec(
        b=raw["b"],
        sigma=raw["sigma"],
        beta=raw.get("beta", 0.0),
        grid=JumpGrid.from_json(raw.get("jumps") or []),
        alpha=raw["alpha"],
        T=raw["T"],
        constraint=ConstraintSet(float(constraint["lo"]), float(constraint["hi"])),
        s0=raw.get("s0", 100.0),
    )


def terminal_liability(terminal: Dict[str, Any], terminal_prices: np.ndarray) -> np.ndarray:
    """
    B_bar on the terminal lattice slice.

    constant: value everywhere; call: min((S_T - strike)+, cap); table: one value per node.
    """
    prices = np.asarray(terminal_prices, dtype=float).reshape(-1)
    kind = terminal.get("kind", "constant")
    if kind == "constant":
        out = np.full(prices.size, float(terminal.get("value", 0.0)))
    elif kind == "call":
        strike = terminal.get("strike")
        if strike is None:
            raise ParameterError("A call payoff needs a strike")
        out = np.maximum(prices - float(strike), 0.0)
        if terminal.get("cap") is not None:
            out = np.minimum(out, float(terminal["cap"]))
    elif kind == "table":
        values = np.asarray(terminal.get("values") or [], dtype=float).reshape(-1)
        if values.size != prices.size:
            raise ShapeError(f"Terminal table lists {values.size} values for {prices.size} terminal nodes")
        out = values.copy()
    else:
        raise ParameterError(f"Unknown terminal kind {kind!r}")
    if not np.all(np.isfinite(out)):
        raise ParameterError("Terminal liability must be bounded")
    return out
