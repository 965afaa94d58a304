"""
Constructive pipeline for the quadratic BSDE (f, B_bar).

1. B = B_bar + A_n (pathwise shift on the lattice), then shift B by its minimum so B >= 0.
2. Split B into N equal slices with N large enough that every slice is small.
3. Stage k solves (f^{k,m}, B/N) for each truncation level m; stage 1 uses f^{1,m}, later stages
   re-anchor the generator at the running sums of the earlier stages.
4. The stage solutions of the last level add up to a solution of (f~, B).
5. The change of variables turns it into a solution of (f, B_bar).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.controllers.bsde_solver import BsdeSolution, check_apriori, picard_residual, solve
from app.controllers.generator import (
    GeneratorKind,
    GeneratorSpec,
    apriori_constants,
    baseline,
    f_1m_eval,
)
from app.controllers.lattice import Lattice
from app.controllers.levy_measure import equivalence_constant, exhausting_level, l2_norm_sq
from app.controllers.market import MarketSpec, theta
from app.core.config import settings
from app.core.exceptions import ConfigurationError, ParameterError
from app.core.execution_context import scoped
from app.models.schemas import CascadeTraceReport, LevelDiagnostics, StageRecord

logger = logging.getLogger(__name__)

FORWARD = "forward"
INVERSE = "inverse"

# Floating slack on the per-stage sup bound
_BOUND_SLACK = 1e-12


def compute_N(M_B: float, alpha: float, C: float, stage: int = 1) -> int:
    """
    Smallest N with M_B / N <= min(1/(32 alpha), 1/(16 C)) (stage 1) or
    min(1/(32 alpha), 1/(24 C)) (stage >= 2). Exact rational arithmetic.
    """
    if M_B < 0:
        raise ParameterError(f"M_B must be nonnegative, got {M_B}")
    if not (alpha > 0 and C > 0):
        raise ParameterError("alpha and C must be positive")
    factor = 16 if stage == 1 else 24
    need = Fraction(M_B) * max(32 * Fraction(alpha), factor * Fraction(C))
    return max(1, math.ceil(need))


def stage_threshold(alpha: float, C: float, stage: int = 1) -> float:
    factor = 16 if stage == 1 else 24
    return min(1.0 / (32.0 * alpha), 1.0 / (factor * C))


def truncate_terminal(B_values: np.ndarray, n: float) -> np.ndarray:
    """B ∧ n (nonnegative-terminal convention)."""
    if not n >= 1:
        raise ParameterError(f"Truncation level n must be >= 1, got {n}")
    return np.minimum(np.asarray(B_values, dtype=float), n)


def truncate_terminal_two_sided(B_values: np.ndarray, n: float, p: float) -> np.ndarray:
    """min(B+, n) - min(B-, p) for terminal conditions of either sign."""
    if not (n >= 1 and p >= 1):
        raise ParameterError("Truncation levels must be >= 1")
    B = np.asarray(B_values, dtype=float)
    return np.minimum(np.maximum(B, 0.0), n) - np.minimum(np.maximum(-B, 0.0), p)


@dataclass
class CascadeConfig:
    B: np.ndarray
    M_B: float
    alpha: float
    C: float
    m_schedule: List[Optional[int]] = field(default_factory=lambda: list(settings.DEFAULT_M_SCHEDULE))
    N_override: Optional[int] = None
    picard_tol: float = settings.PICARD_TOL
    max_iter: int = settings.PICARD_MAX_ITER
    M_cap: Optional[float] = None

    def __post_init__(self) -> None:
        self.B = np.asarray(self.B, dtype=float)
        if self.B.size and self.M_B < float(np.max(np.abs(self.B))) - 1e-15:
            raise ParameterError(f"M_B={self.M_B} is below max|B|={float(np.max(np.abs(self.B)))}")
        finite = [m for m in self.m_schedule if m is not None]
        if not self.m_schedule or None in self.m_schedule[:-1]:
            raise ConfigurationError("m_schedule must be non-empty with None only as its last level",
                                     pointer="/cascade/m_schedule")
        if any(b <= a for a, b in zip(finite, finite[1:])) or any(m < 1 for m in finite):
            raise ConfigurationError("m_schedule must be strictly increasing positive integers",
                                     pointer="/cascade/m_schedule")

    @classmethod
    def for_terminal(
        cls,
        B: np.ndarray,
        spec: MarketSpec,
        times: Optional[np.ndarray] = None,
        m_schedule: Optional[Sequence[Optional[int]]] = None,
        N_override: Optional[int] = None,
        picard_tol: Optional[float] = None,
        max_iter: Optional[int] = None,
    ) -> "CascadeConfig":
        B = np.asarray(B, dtype=float)
        M_B = float(np.max(np.abs(B))) if B.size else 0.0
        return cls(
            B=B,
            M_B=M_B,
            alpha=spec.alpha,
            C=equivalence_constant(spec.alpha, 2.0 * M_B),
            m_schedule=list(settings.DEFAULT_M_SCHEDULE if m_schedule is None else m_schedule),
            N_override=N_override,
            picard_tol=settings.PICARD_TOL if picard_tol is None else picard_tol,
            max_iter=settings.PICARD_MAX_ITER if max_iter is None else max_iter,
            M_cap=apriori_constants(spec, M_B, times)[2],
        )

    @property
    def last_level(self) -> Optional[int]:
        return self.m_schedule[-1]


@dataclass
class StageResult:
    k: int
    solution: Optional[BsdeSolution]
    record: StageRecord


class CascadeTrace:
    """Append-only record of the stages; `running[m]` holds the running sums per level."""

    def __init__(self, config: CascadeConfig, N: int, N1: int, N2: int, heuristic: bool):
        self.config = config
        self.N = N
        self.N1 = N1
        self.N2 = N2
        self.heuristic = heuristic
        self.stages: List[StageResult] = []
        self.running: Dict[Optional[int], BsdeSolution] = {}
        self.assembled_residual: float = 0.0
        self.transported_residual: Optional[float] = None
        self.shift: float = 0.0

    def to_report(self) -> CascadeTraceReport:
        cfg = self.config
        return CascadeTraceReport(
            M_B=cfg.M_B,
            shift=self.shift,
            alpha=cfg.alpha,
            equivalence_constant=cfg.C,
            N_stage1=self.N1,
            N_stage2=self.N2,
            N=self.N,
            N_override=cfg.N_override,
            heuristic=self.heuristic,
            thresholds={
                "stage1": stage_threshold(cfg.alpha, cfg.C, 1),
                "stage2": stage_threshold(cfg.alpha, cfg.C, 2),
            },
            m_schedule=list(cfg.m_schedule),
            assembled_residual=self.assembled_residual,
            transported_residual=self.transported_residual,
            stages=[s.record for s in self.stages],
        )


def resolve_N(config: CascadeConfig):
    """(N, N_stage1, N_stage2, heuristic)."""
    N1 = compute_N(config.M_B, config.alpha, config.C, 1)
    N2 = compute_N(config.M_B, config.alpha, config.C, 2)
    required = max(N1, N2)
    if config.N_override is not None:
        if config.N_override < required:
            logger.warning(
                f"⚠️ N_override={config.N_override} is below the sufficient N={required}; "
                f"stage bounds are no longer guaranteed and results are HEURISTIC"
            )
            return config.N_override, N1, N2, True
        return config.N_override, N1, N2, False
    if required > settings.N_STAGE_CAP:
        raise ConfigurationError(
            f"The splitting condition requires N={required} stages (> {settings.N_STAGE_CAP}); "
            f"set cascade.N_override to run a heuristic cascade",
            pointer="/cascade/N_override",
        )
    return required, N1, N2, False


def _weighted_sq(lattice: Lattice, probs: List[np.ndarray], diffs: List[np.ndarray]) -> float:
    return float(sum(p @ d for p, d in zip(probs, diffs)) * lattice.dt)


def run_stage(
    k: int,
    lattice: Lattice,
    spec: MarketSpec,
    config: CascadeConfig,
    running: Dict[Optional[int], BsdeSolution],
    N: int,
    probs: Optional[List[np.ndarray]] = None,
) -> StageResult:
    """
    Solve (f^{k,m}, B/N) for every level of the schedule. `running` holds the running sums of
    stages < k per level (empty for k = 1) and is updated in place.
    """
    if k >= 2 and any(m not in running for m in config.m_schedule):
        raise ConfigurationError(f"Stage {k} needs anchors from stage {k - 1}")
    probs = probs if probs is not None else lattice.all_node_probabilities()
    slice_B = config.B / N
    bound = config.M_B / N
    level_solutions: List[BsdeSolution] = []
    levels: List[LevelDiagnostics] = []

    for m in config.m_schedule:
        M_cap = config.M_cap if m is not None else None
        if k == 1:
            gen = GeneratorSpec(spec, GeneratorKind.F_1M, m=m, M_cap=M_cap, k=1)
        else:
            anchor = running[m]
            gen = GeneratorSpec(
                spec, GeneratorKind.F_KM, m=m, M_cap=M_cap, anchor_z=anchor.Z, anchor_u=anchor.U, k=k
            )
        with scoped(stage=k, m_level=m):
            sol = solve(lattice, gen, slice_B, config.picard_tol, config.max_iter, terminal_tag=f"B/{N}")
        level_solutions.append(sol)
        levels.append(LevelDiagnostics(
            m=m,
            Y0=sol.Y0,
            sup_abs_Y=sol.sup_abs_Y,
            bound=bound,
            bound_ok=sol.sup_abs_Y <= bound + _BOUND_SLACK * max(1.0, bound),
            max_residual=sol.max_residual,
        ))

    # Y^{k,m} along the schedule (nondecreasing for k = 1) and the running sums (nondecreasing for all k)
    monotone_gap = 0.0
    running_gap = 0.0
    new_running: Dict[Optional[int], BsdeSolution] = {}
    for m, sol in zip(config.m_schedule, level_solutions):
        new_running[m] = sol if k == 1 else running[m].combine(sol)
    for a, b in zip(level_solutions, level_solutions[1:]):
        monotone_gap = min(monotone_gap, min(float(np.min(y2 - y1)) for y1, y2 in zip(a.Y, b.Y)))
    sums = [new_running[m] for m in config.m_schedule]
    for a, b in zip(sums, sums[1:]):
        running_gap = min(running_gap, min(float(np.min(y2 - y1)) for y1, y2 in zip(a.Y, b.Y)))

    cauchy_Z: List[float] = []
    cauchy_U: List[float] = []
    for a, b in zip(level_solutions, level_solutions[1:]):
        cauchy_Z.append(_weighted_sq(lattice, probs, [(z2 - z1) ** 2 for z1, z2 in zip(a.Z, b.Z)]))
        cauchy_U.append(_weighted_sq(
            lattice, probs, [np.asarray(l2_norm_sq(u2 - u1, spec.grid.w)).reshape(-1) for u1, u2 in zip(a.U, b.U)]
        ))

    # Telescoping: sum of stage drivers equals f^{1,m} at the running sums (last level)
    last = config.last_level
    total = new_running[last]
    stage_sol = level_solutions[-1]
    tele = 0.0
    final_gen = GeneratorSpec(spec, GeneratorKind.F_1M, m=last, M_cap=config.M_cap if last is not None else None)
    for i in range(lattice.n_steps):
        t = float(lattice.times[i])
        driver_sum = (total.Y[i] - lattice.expectation(i, total.Y[i + 1])) / lattice.dt
        target = np.asarray(f_1m_eval(final_gen, t, total.Z[i], total.U[i]))
        tele = max(tele, float(np.max(np.abs(driver_sum - target))))

    running.clear()
    running.update(new_running)

    bound_ok = all(lv.bound_ok for lv in levels)
    if not bound_ok:
        logger.warning(f"⚠️ Stage {k}: sup|Y| exceeds M_B/N={bound:.6g}")
    record = StageRecord(
        k=k,
        N=N,
        Y0=stage_sol.Y0,
        sup_abs_Y=stage_sol.sup_abs_Y,
        bound=bound,
        bound_ok=bound_ok,
        telescoping_residual=tele,
        monotone_gap=monotone_gap,
        running_sum_monotone_gap=running_gap,
        cauchy_Z=cauchy_Z,
        cauchy_U=cauchy_U,
        levels=levels,
    )
    logger.debug(f"Stage {k}/{N} done: Y0={stage_sol.Y0:.10g}, sup={stage_sol.sup_abs_Y:.3g}, tele={tele:.2e}")
    return StageResult(k=k, solution=stage_sol, record=record)


def _recentred_driver(spec: MarketSpec, config: CascadeConfig) -> GeneratorSpec:
    last = config.last_level
    if last is None:
        return GeneratorSpec(spec, GeneratorKind.F_TILDE)
    return GeneratorSpec(spec, GeneratorKind.F_1M, m=last, M_cap=config.M_cap)


def run_cascade(
    lattice: Lattice,
    spec: MarketSpec,
    config: CascadeConfig,
    keep_stages: bool = True,
) -> CascadeTrace:
    N, N1, N2, heuristic = resolve_N(config)
    trace = CascadeTrace(config, N, N1, N2, heuristic)
    last = config.last_level
    if last is not None and last < exhausting_level(spec.grid):
        logger.warning(
            f"⚠️ Last truncation level m={last} leaves jump atoms out; the cascade solves a truncated problem"
        )
    elif last is not None:
        logger.warning(f"⚠️ Last truncation level m={last} keeps the z cut-off active beyond |z| > {last}")

    logger.info(
        f"Cascade: M_B={config.M_B:.6g}, C={config.C:.6g}, N={N} (stage1 {N1}, stage2 {N2}), "
        f"levels={config.m_schedule}"
    )
    probs = lattice.all_node_probabilities()
    running: Dict[Optional[int], BsdeSolution] = {}
    for k in range(1, N + 1):
        result = run_stage(k, lattice, spec, config, running, N, probs)
        if not keep_stages:
            result.solution = None
        trace.stages.append(result)
    trace.running = running
    assembled = assemble(trace, lattice)
    trace.assembled_residual = picard_residual(assembled, lattice, _recentred_driver(spec, config))
    logger.info(f"✅ Cascade assembled: Y0={assembled.Y0:.10g}, residual={trace.assembled_residual:.3g}")
    return trace


def assemble(trace: CascadeTrace, lattice: Optional[Lattice] = None) -> BsdeSolution:
    """Sum of the stage solutions of the last level, i.e. a solution of (f~, B)."""
    last = trace.config.last_level
    if last in trace.running:
        total = trace.running[last]
    else:
        if lattice is None:
            raise ConfigurationError("Cannot assemble an empty cascade without a lattice")
        total = BsdeSolution.zeros(lattice)
    label = "F_TILDE" if last is None else f"F_1M(m={last})"
    out = BsdeSolution(total.lattice, total.Y, total.Z, total.U, generator=label, terminal="B")
    out.heuristic = trace.heuristic
    return out


# ==================== CHANGE OF VARIABLES ====================

def shift_process(lattice: Lattice, spec: MarketSpec) -> List[np.ndarray]:
    """A_i = sum_{s<i} f(t_s, -theta/alpha, 0) dt + sum_{s<i} (theta_s / alpha) dW_s per node."""
    A = [np.zeros(1)]
    for i in range(lattice.n_steps):
        t = float(lattice.times[i])
        drift = baseline(spec, t) * lattice.dt
        step = drift + (theta(spec, t) / spec.alpha) * lattice.dW  # (K,)
        nxt = np.empty(lattice.level_size(i + 1))
        nxt[lattice.children[i]] = A[-1][:, None] + step[None, :]
        A.append(nxt)
    return A


def change_of_variables(
    solution: BsdeSolution,
    direction: str,
    lattice: Lattice,
    spec: MarketSpec,
    A: Optional[List[np.ndarray]] = None,
) -> BsdeSolution:
    """
    forward: (Y, Z, U) of (f~, B) -> (Y - A, Z - theta/alpha, U) of (f, B - A_n)
    inverse: the exact inverse map.
    """
    if direction not in (FORWARD, INVERSE):
        raise ParameterError(f"direction must be '{FORWARD}' or '{INVERSE}'")
    A = shift_process(lattice, spec) if A is None else A
    sign = -1.0 if direction == FORWARD else 1.0
    Y = [y + sign * a for y, a in zip(solution.Y, A)]
    Z = [z + sign * theta(spec, float(t)) / spec.alpha for z, t in zip(solution.Z, lattice.times[:-1])]
    U = [u.copy() for u in solution.U]
    label = "F" if direction == FORWARD else "F_TILDE"
    out = BsdeSolution(lattice, Y, Z, U, generator=label, terminal="B_bar" if direction == FORWARD else "B")
    out.heuristic = solution.heuristic
    return out


def exp_identity_gap(
    solution_tilde: BsdeSolution,
    solution_bar: BsdeSolution,
    lattice: Lattice,
    spec: MarketSpec,
) -> Dict[str, float]:
    """
    exact:    max relative gap of exp(alpha Y_bar) = exp(alpha Y) prod exp(-theta dW - theta^2 dt / 2)
    doleans:  probability-weighted mean relative gap when the factor is prod (1 - theta dW)
    """
    alpha = spec.alpha
    exact = 0.0
    doleans = 0.0
    log_exact = [np.zeros(1)]
    log_dd = [np.zeros(1)]
    for i in range(lattice.n_steps):
        th = theta(spec, float(lattice.times[i]))
        step_exact = -th * lattice.dW - 0.5 * th * th * lattice.dt
        step_dd = np.log1p(-th * lattice.dW)
        for store, step in ((log_exact, step_exact), (log_dd, step_dd)):
            nxt = np.empty(lattice.level_size(i + 1))
            nxt[lattice.children[i]] = store[-1][:, None] + step[None, :]
            store.append(nxt)
    probs = lattice.all_node_probabilities()
    for i in range(lattice.n_steps + 1):
        target = alpha * solution_bar.Y[i]
        base = alpha * solution_tilde.Y[i]
        exact = max(exact, float(np.max(np.abs(np.expm1(base + log_exact[i] - target)))))
        rel = np.abs(np.expm1(base + log_dd[i] - target))
        doleans = max(doleans, float(probs[i] @ rel))
    return {"exact": exact, "doleans": doleans}


def solve_quadratic(
    lattice: Lattice,
    spec: MarketSpec,
    B_bar: np.ndarray,
    m_schedule: Optional[Sequence[Optional[int]]] = None,
    N_override: Optional[int] = None,
    picard_tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    keep_stages: bool = False,
) -> BsdeSolution:
    """
    Solution (Y_bar, Z_bar, U_bar) of (f, B_bar). The cascade trace and the a priori report are
    attached as `solution.trace` and `solution.apriori`.
    """
    B_bar = np.asarray(B_bar, dtype=float).reshape(-1)
    n = lattice.n_steps
    if B_bar.size != lattice.level_size(n):
        raise ParameterError(f"B_bar needs {lattice.level_size(n)} terminal values, got {B_bar.size}")
    if not np.all(np.isfinite(B_bar)):
        raise ParameterError("B_bar must be bounded (finite) on the terminal slice")
    spec.validate_on(lattice.times)

    A = shift_process(lattice, spec)
    B = B_bar + A[n]
    shift = float(np.min(B)) if B.size else 0.0
    config = CascadeConfig.for_terminal(
        B - shift, spec, lattice.times, m_schedule, N_override, picard_tol, max_iter
    )
    trace = run_cascade(lattice, spec, config, keep_stages=keep_stages)
    trace.shift = shift

    tilde = assemble(trace, lattice)
    tilde = BsdeSolution(
        lattice, [y + shift for y in tilde.Y], tilde.Z, tilde.U, generator=tilde.generator, terminal="B"
    )
    tilde.heuristic = trace.heuristic
    bar = change_of_variables(tilde, FORWARD, lattice, spec, A)
    f_driver = GeneratorSpec(spec, GeneratorKind.F)
    residual = picard_residual(bar, lattice, f_driver)
    trace.transported_residual = residual
    bar.residuals = [residual] * n
    bar.apriori = check_apriori(bar, float(np.max(np.abs(B_bar))) if B_bar.size else 0.0, spec, family="H1")
    bar.trace = trace
    if trace.heuristic:
        logger.warning("⚠️ Solution produced with N_override below the sufficient N: HEURISTIC")
    logger.info(f"✅ Quadratic BSDE solved: Y_bar_0={bar.Y0:.10g}, residual={residual:.3g}")
    return bar
