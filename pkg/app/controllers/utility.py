"""
Exponential utility maximization on top of the (f, B_bar) solution.

    V(x) = -exp(-alpha (x - Y_bar_0))
    pi*  in argmin_{pi in C} (alpha/2) |pi sigma - (Z_bar + theta/alpha)|^2 + |U_bar - pi beta|_alpha
    R^pi = -exp(-alpha X^pi) exp(alpha Y)   supermartingale for every pi, martingale for the optimizer
"""
from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.controllers.bsde_solver import BsdeSolution
from app.controllers.generator import f_eval, inner_objective, minimize_batch
from app.controllers.lattice import MODE_TREE, Lattice, PathBatch, sample_branches
from app.controllers.levy_measure import EXP_ARG_MAX, u_alpha_norm
from app.controllers.market import ConstraintSet, MarketSpec
from app.core.config import settings
from app.core.exceptions import AdmissibilityError, ParameterError, ShapeError
from app.models.schemas import OptimalityReport, StrategyVerdict

logger = logging.getLogger(__name__)

# Tolerances of the optimality verdicts
SUPERMARTINGALE_TOL = 1e-9
MARTINGALE_TOL = 1e-6
# pi* read off the BSDE is a martingale for the lattice value only up to discretization
BSDE_MARTINGALE_PER_DT = 1e-2
A_OPTIMAL_TOL = 1e-6
SE_MULTIPLIER = 3.0


def value_function(Y_bar_0: float, x: float, alpha: float) -> float:
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    exponent = -alpha * (x - Y_bar_0)
    if exponent > EXP_ARG_MAX:
        raise ParameterError(f"-alpha (x - Y_bar_0) = {exponent:.6g} overflows")
    return -float(np.exp(exponent))


class StrategyTable:
    """Position pi per node for levels 0..n-1, held over the following step."""

    def __init__(self, lattice: Lattice, pi: List[np.ndarray], constraint: ConstraintSet, name: str = "strategy"):
        if len(pi) != lattice.n_steps:
            raise ShapeError(f"Strategy needs {lattice.n_steps} levels, got {len(pi)}")
        for i, p in enumerate(pi):
            if np.shape(p) != (lattice.level_size(i),):
                raise ShapeError(f"Strategy level {i} has shape {np.shape(p)}")
            if not constraint.contains(p, slack=1e-12):
                raise AdmissibilityError(
                    f"Strategy '{name}' leaves C=[{constraint.lo}, {constraint.hi}] at level {i}"
                )
        self.lattice = lattice
        self.pi = [np.asarray(p, dtype=float) for p in pi]
        self.constraint = constraint
        self.name = name

    @classmethod
    def constant(cls, lattice: Lattice, value: float, constraint: ConstraintSet, name: str = "") -> "StrategyTable":
        pi = [np.full(lattice.level_size(i), float(value)) for i in range(lattice.n_steps)]
        return cls(lattice, pi, constraint, name or f"const_{value:g}")

    def shifted(self, delta: float, name: str = "") -> "StrategyTable":
        return StrategyTable(self.lattice, [p + delta for p in self.pi], self.constraint, name or f"{self.name}+{delta:g}")

    @property
    def max_abs(self) -> float:
        return max((float(np.max(np.abs(p))) for p in self.pi), default=0.0)

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for i, p in enumerate(self.pi):
            frames.append(pd.DataFrame({
                "time_index": np.full(p.size, i),
                "node_id": self.lattice.node_ids(i),
                "t": np.full(p.size, self.lattice.times[i]),
                "pi": p,
            }))
        if not frames:
            return pd.DataFrame(columns=["time_index", "node_id", "t", "pi"])
        return pd.concat(frames, ignore_index=True)


def optimal_strategy(solution: BsdeSolution, spec: MarketSpec, lattice: Lattice) -> StrategyTable:
    pi = [
        np.asarray(f_eval(spec, float(lattice.times[i]), solution.Z[i], solution.U[i]).pi_star, dtype=float).reshape(-1)
        for i in range(lattice.n_steps)
    ]
    return StrategyTable(lattice, pi, spec.constraint, name="pi_star")


def A_process(strategy: StrategyTable, solution: BsdeSolution, spec: MarketSpec, lattice: Lattice) -> List[np.ndarray]:
    """
    Per-step increments alpha (-pi b - f(Z, U) + (alpha/2) |pi sigma - Z|^2 + |U - pi beta|_alpha) dt.
    """
    out = []
    alpha = spec.alpha
    for i in range(lattice.n_steps):
        t = float(lattice.times[i])
        pi = strategy.pi[i]
        Z, U = solution.Z[i], solution.U[i]
        f_val = np.asarray(f_eval(spec, t, Z, U).value)
        jump = np.asarray(u_alpha_norm(alpha, U - pi[:, None] * spec.beta_at(t)[None, :], spec.grid.w))
        inc = alpha * (
            -pi * spec.b(t) - f_val + 0.5 * alpha * (pi * spec.sigma(t) - Z) ** 2 + jump
        ) * lattice.dt
        out.append(np.asarray(inc, dtype=float).reshape(-1))
    return out


def random_strategies(lattice: Lattice, constraint: ConstraintSet, count: int, seed: int) -> List[StrategyTable]:
    """Uniform i.i.d. positions in C at every node."""
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for s, child in enumerate(children):
        rng = np.random.default_rng(child)
        pi = [rng.uniform(constraint.lo, constraint.hi, size=lattice.level_size(i)) for i in range(lattice.n_steps)]
        out.append(StrategyTable(lattice, pi, constraint, name=f"random_{s}"))
    return out


def discrete_value(spec: MarketSpec, lattice: Lattice, B_bar: np.ndarray, tol: Optional[float] = None):
    """
    Exact utility dynamic program on the lattice:

        exp(alpha Y_hat_i) = min_{pi in C} E_i[ exp(-alpha pi r + alpha Y_hat_{i+1}) ],  Y_hat_n = B_bar

    Returns (Y_hat levels, StrategyTable of the minimizers).
    """
    tol = settings.MINIMIZE_TOL if tol is None else tol
    alpha = spec.alpha
    C = spec.constraint
    n = lattice.n_steps
    r = lattice.returns(spec)
    Y_hat: List[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    pi_hat: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    Y_hat[n] = np.asarray(B_bar, dtype=float).reshape(-1).copy()
    for i in range(n - 1, -1, -1):
        child = lattice.gather(i, Y_hat[i + 1])  # (n_i, K)
        top = child.max(axis=1)
        scaled = alpha * (child - top[:, None])

        def objective(p: np.ndarray, scaled=scaled, ri=r[i]) -> np.ndarray:
            return np.exp(scaled - alpha * p[:, None] * ri[None, :]) @ lattice.probs

        size = child.shape[0]
        found, value = minimize_batch(
            objective, np.full(size, C.lo), np.full(size, C.hi), tol, seeds=[np.zeros(size)]
        )
        pi_hat[i] = found
        Y_hat[i] = top + np.log(value) / alpha
    return Y_hat, StrategyTable(lattice, pi_hat, C, name="pi_hat")


def one_step_gaps(
    spec: MarketSpec, lattice: Lattice, Y_hat: Sequence[np.ndarray], strategy: StrategyTable
) -> List[np.ndarray]:
    """
    E_i[exp(-alpha pi r + alpha (Y_hat_{i+1} - Y_hat_i))] - 1 per node.

    Multiplied by exp(-alpha X_i + alpha Y_hat_i) > 0 this is R_i - E_i[R_{i+1}], so it is >= 0
    for every admissible pi (supermartingale) and 0 for the dynamic-program minimizer.
    """
    alpha = spec.alpha
    r = lattice.returns(spec)
    out = []
    for i in range(lattice.n_steps):
        child = lattice.gather(i, Y_hat[i + 1])
        expo = alpha * (child - Y_hat[i][:, None]) - alpha * strategy.pi[i][:, None] * r[i][None, :]
        out.append(np.expm1(expo) @ lattice.probs)
    return out


def wealth_levels(lattice: Lattice, spec: MarketSpec, strategy: StrategyTable, x: float) -> List[np.ndarray]:
    """Wealth at every tree node (tree mode only: wealth is path dependent)."""
    if lattice.mode != MODE_TREE:
        raise ParameterError("Wealth per node needs the full tree")
    r = lattice.returns(spec)
    X = [np.array([float(x)])]
    for i in range(lattice.n_steps):
        nxt = np.empty(lattice.level_size(i + 1))
        nxt[lattice.children[i]] = X[-1][:, None] + strategy.pi[i][:, None] * r[i][None, :]
        X.append(nxt)
    return X


def nested_gaps(
    spec: MarketSpec,
    lattice: Lattice,
    Y_hat: Sequence[np.ndarray],
    strategy: StrategyTable,
    x: float,
    pairs: Sequence[Tuple[int, int]],
) -> float:
    """min over (s, t) pairs and nodes of (R_s - E_s[R_t]) / |R_s| on the tree."""
    X = wealth_levels(lattice, spec, strategy, x)
    alpha = spec.alpha
    worst = np.inf
    for s, t in pairs:
        if not 0 <= s < t <= lattice.n_steps:
            continue
        ref = -alpha * X[s] + alpha * Y_hat[s]
        # descendants of node a at level s are the contiguous block a*K^(t-s) .. (a+1)*K^(t-s) - 1
        ratio = -np.exp(-alpha * X[t] + alpha * Y_hat[t] - np.repeat(ref, lattice.K ** (t - s)))
        for level in range(t - 1, s - 1, -1):
            ratio = lattice.expectation(level, ratio)
        worst = min(worst, float(np.min(-1.0 - ratio)))
    return float(worst) if np.isfinite(worst) else 0.0


def _min_over_levels(gaps: List[np.ndarray]) -> float:
    return min((float(g.min()) for g in gaps if g.size), default=0.0)


def _max_abs_over_levels(gaps: List[np.ndarray]) -> float:
    return max((float(np.max(np.abs(g))) for g in gaps if g.size), default=0.0)


def simulate_terminal_wealth(
    spec: MarketSpec,
    lattice: Lattice,
    batch: PathBatch,
    strategy: StrategyTable,
    x: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """(X_T, min_t X_t) along the sampled paths."""
    r = lattice.returns(spec)
    nodes = batch.node_indices()
    X = np.full(batch.count, float(x))
    X_min = X.copy()
    for i in range(lattice.n_steps):
        pi = strategy.pi[i][nodes[:, i]]
        X = X + pi * r[i][batch.branches[:, i]]
        X_min = np.minimum(X_min, X)
    return X, X_min


def _mc_utility(alpha: float, X_T: np.ndarray, B_T: np.ndarray) -> Tuple[float, float]:
    util = -np.exp(-alpha * (X_T - B_T))
    se = float(util.std(ddof=1) / np.sqrt(util.size)) if util.size >= 2 else 0.0
    return float(util.mean()), se


def verify_optimality(
    spec: MarketSpec,
    lattice: Lattice,
    solution: BsdeSolution,
    x: float,
    strategies: Optional[List[StrategyTable]] = None,
    paths: int = 100_000,
    seed: int = 0,
    n_random: int = 20,
    pairs: Optional[Sequence[Tuple[int, int]]] = None,
) -> OptimalityReport:
    """
    Optimality checks of the strategy read off the solution:
      - A-process of pi* vanishes, A of random strategies is nonnegative
      - one-step supermartingale / martingale gaps (exact on the lattice, dynamic-program value)
      - nested (s, t) supermartingale gaps on the full tree
      - Monte Carlo expected utility of every strategy vs V(x)
      - uniform-integrability proxy: sup exp(-alpha X) within its hard bound
    """
    n = lattice.n_steps
    B_bar = solution.Y[n]
    V = value_function(solution.Y0, x, spec.alpha)
    pi_star = optimal_strategy(solution, spec, lattice)
    if strategies is None:
        strategies = random_strategies(lattice, spec.constraint, n_random, seed)
    for s in strategies:
        if not spec.constraint.contains(np.concatenate(s.pi) if s.pi else np.zeros(0), slack=1e-12):
            raise AdmissibilityError(f"Strategy '{s.name}' is not admissible")

    # A-process
    A_opt = A_process(pi_star, solution, spec, lattice)
    A_max_abs = max((float(np.max(np.abs(a))) for a in A_opt if a.size), default=0.0)
    A_min = np.inf
    for s in strategies:
        for a in A_process(s, solution, spec, lattice):
            if a.size:
                A_min = min(A_min, float(a.min()))
    A_min = 0.0 if not np.isfinite(A_min) else A_min

    # Exact lattice checks against the dynamic-program value
    Y_hat, pi_hat = discrete_value(spec, lattice, B_bar)
    Y_hat_0 = float(Y_hat[0][0])

    super_gap = min(
        (_min_over_levels(one_step_gaps(spec, lattice, Y_hat, s)) for s in strategies + [pi_star]),
        default=0.0,
    )
    mart_gap = _max_abs_over_levels(one_step_gaps(spec, lattice, Y_hat, pi_hat))
    bsde_mart_gap = _max_abs_over_levels(one_step_gaps(spec, lattice, Y_hat, pi_star))

    nested = 0.0
    exact_mode = lattice.mode
    if lattice.mode == MODE_TREE and n >= 1:
        pairs = pairs or [(0, n), (0, max(1, n // 2)), (max(0, n // 2), n)]
        nested = min(nested_gaps(spec, lattice, Y_hat, s, x, pairs) for s in strategies + [pi_star])

    # Monte Carlo
    batch = sample_branches(lattice, paths, seed)
    nodes_T = batch.node_indices()[:, n]
    B_T = B_bar[nodes_T]
    per_strategy: List[StrategyVerdict] = []
    X_T, X_min_all = simulate_terminal_wealth(spec, lattice, batch, pi_star, x)
    est, se = _mc_utility(spec.alpha, X_T, B_T)
    star_ok = abs(est - V) <= SE_MULTIPLIER * se + 1e-12
    per_strategy.append(StrategyVerdict(id=pi_star.name, estimate=est, se=se, verdict=star_ok))
    x_min = float(X_min_all.min())
    for s in strategies:
        X_T_s, X_min_s = simulate_terminal_wealth(spec, lattice, batch, s, x)
        est_s, se_s = _mc_utility(spec.alpha, X_T_s, B_T)
        per_strategy.append(StrategyVerdict(
            id=s.name, estimate=est_s, se=se_s, verdict=est_s <= V + SE_MULTIPLIER * se_s
        ))
        x_min = min(x_min, float(X_min_s.min()))

    # Uniform-integrability proxy
    r = lattice.returns(spec)
    pi_max = max([pi_star.max_abs] + [s.max_abs for s in strategies])
    r_max = float(np.max(np.abs(r))) if r.size else 0.0
    ui_exponent = spec.alpha * (abs(x) + n * pi_max * r_max)
    ui_ok = -spec.alpha * x_min <= ui_exponent + 1e-12

    passed = (
        all(v.verdict for v in per_strategy)
        and A_max_abs <= A_OPTIMAL_TOL
        and A_min >= -SUPERMARTINGALE_TOL
        and super_gap >= -SUPERMARTINGALE_TOL
        and mart_gap <= MARTINGALE_TOL
        and bsde_mart_gap <= BSDE_MARTINGALE_PER_DT * lattice.dt
        and nested >= -SUPERMARTINGALE_TOL
        and ui_ok
    )
    report = OptimalityReport(
        V_formula=V,
        V_mc_estimate=est,
        V_mc_se=se,
        x=float(x),
        Y_bar_0=solution.Y0,
        Y_hat_0=Y_hat_0,
        value_gap=Y_hat_0 - solution.Y0,
        per_strategy=per_strategy,
        A_max_abs_optimal=A_max_abs,
        A_min_random=A_min,
        supermartingale_worst_gap=super_gap,
        martingale_max_abs_gap=mart_gap,
        bsde_martingale_max_abs_gap=bsde_mart_gap,
        nested_worst_gap=nested,
        ui_bound_ok=ui_ok,
        exact_mode=exact_mode,
        passed=passed,
    )
    if passed:
        logger.info(f"✅ Optimality verified: V={V:.10g}, MC={est:.10g} ± {se:.2g}")
    else:
        logger.warning(f"⚠️ Optimality checks failed: V={V:.10g}, MC={est:.10g} ± {se:.2g}")
    return report
