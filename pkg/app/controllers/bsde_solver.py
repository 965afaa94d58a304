"""
Backward induction for Lipschitz BSDEs with jumps on a Lattice.

    Y_i = E_i[Y_{i+1}] + f(t_i, Y_i, Z_i, U_i) dt
    Z_i = E_i[Y_{i+1} dW] / dt,   U_i = discrete jump amplitude of Y_{i+1}

Implicit in Y, explicit in (Z, U). A driver is any callable
driver(level, t, y, z, u) -> values; drivers whose `depends_on_y` attribute is False
(every generator of the quadratic family) are evaluated once per slice.
"""
from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.controllers.generator import apriori_constants, h1_constants
from app.controllers.lattice import Lattice
from app.controllers.levy_measure import equivalence_constant, l2_norm_sq, linf_norm, u_alpha_norm
from app.controllers.market import MarketSpec
from app.core.config import settings
from app.core.exceptions import ConvergenceError, ShapeError
from app.core.execution_context import get_m_level, get_stage, get_subcommand
from app.models.schemas import AprioriReport, BoundCheck, SolveSummary

logger = logging.getLogger(__name__)

Driver = Callable[[int, float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class FunctionDriver:
    """Adapts fn(t, y, z, u) to the driver protocol."""

    def __init__(self, fn: Callable[..., np.ndarray], depends_on_y: bool = True, label: str = "custom"):
        self.fn = fn
        self.depends_on_y = depends_on_y
        self.label = label

    def __call__(self, level: int, t: float, y: np.ndarray, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fn(t, y, z, u), dtype=float), np.shape(z))


def zero_driver() -> FunctionDriver:
    return FunctionDriver(lambda t, y, z, u: np.zeros_like(z), depends_on_y=False, label="zero")


def _label(driver: Driver) -> str:
    return str(getattr(driver, "label", type(driver).__name__))


class BsdeSolution:
    """
    Per-node triple on a lattice: Y[i] has shape (n_i,) for i = 0..n, Z[i] shape (n_i,) and
    U[i] shape (n_i, J) for i = 0..n-1 (they live on the step leaving level i).
    """

    def __init__(
        self,
        lattice: Lattice,
        Y: List[np.ndarray],
        Z: List[np.ndarray],
        U: List[np.ndarray],
        generator: str = "",
        terminal: str = "",
        iterations: Optional[List[np.ndarray]] = None,
        residuals: Optional[List[float]] = None,
    ):
        if len(Y) != lattice.n_steps + 1 or len(Z) != lattice.n_steps or len(U) != lattice.n_steps:
            raise ShapeError("Solution slices do not match the lattice depth")
        self.lattice = lattice
        self.Y = Y
        self.Z = Z
        self.U = U
        self.generator = generator
        self.terminal = terminal
        self.iterations = iterations or [np.ones(y.shape, dtype=int) for y in Z]
        self.residuals = residuals or [0.0] * lattice.n_steps
        self.heuristic = False
        # Filled in by the quadratic pipeline
        self.apriori: Optional[AprioriReport] = None
        self.trace = None

    @property
    def Y0(self) -> float:
        return float(self.Y[0][0])

    @property
    def sup_abs_Y(self) -> float:
        return max(float(np.max(np.abs(y))) for y in self.Y)

    @property
    def max_residual(self) -> float:
        return max(self.residuals, default=0.0)

    def combine(self, other: "BsdeSolution", sign: float = 1.0, generator: str = "") -> "BsdeSolution":
        """Slice-wise self + sign * other."""
        return BsdeSolution(
            self.lattice,
            [a + sign * b for a, b in zip(self.Y, other.Y)],
            [a + sign * b for a, b in zip(self.Z, other.Z)],
            [a + sign * b for a, b in zip(self.U, other.U)],
            generator=generator or self.generator,
            terminal=self.terminal,
        )

    @classmethod
    def zeros(cls, lattice: Lattice, generator: str = "", terminal: str = "") -> "BsdeSolution":
        J = lattice.grid.size
        sizes = [lattice.level_size(i) for i in range(lattice.n_steps + 1)]
        return cls(
            lattice,
            [np.zeros(s) for s in sizes],
            [np.zeros(s) for s in sizes[:-1]],
            [np.zeros((s, J)) for s in sizes[:-1]],
            generator=generator,
            terminal=terminal,
        )

    def to_frame(self) -> pd.DataFrame:
        J = self.lattice.grid.size
        frames = []
        for i, y in enumerate(self.Y):
            data = {
                "time_index": np.full(y.size, i),
                "node_id": self.lattice.node_ids(i),
                "t": np.full(y.size, self.lattice.times[i]),
                "Y": y,
            }
            if i < self.lattice.n_steps:
                data["Z"] = self.Z[i]
                for j in range(J):
                    data[f"U_{j + 1}"] = self.U[i][:, j]
            else:
                data["Z"] = np.full(y.size, np.nan)
                for j in range(J):
                    data[f"U_{j + 1}"] = np.full(y.size, np.nan)
            frames.append(pd.DataFrame(data))
        return pd.concat(frames, ignore_index=True)

    def summary(self, apriori: Optional[AprioriReport] = None) -> SolveSummary:
        iters = [int(it.max()) for it in self.iterations if it.size]
        return SolveSummary(
            generator=self.generator,
            terminal=self.terminal,
            n_steps=self.lattice.n_steps,
            mode=self.lattice.mode,
            Y0=self.Y0,
            sup_abs_Y=self.sup_abs_Y,
            max_residual=self.max_residual,
            max_iterations=max(iters, default=0),
            total_iterations=int(sum(int(it.sum()) for it in self.iterations)),
            heuristic=self.heuristic,
            apriori=apriori or self.apriori,
        )

    def __repr__(self) -> str:
        return f"BsdeSolution({self.generator}, Y0={self.Y0:.10g}, residual={self.max_residual:.3g})"


def _picard_slice(
    driver: Driver,
    level: int,
    t: float,
    dt: float,
    E: np.ndarray,
    Z: np.ndarray,
    U: np.ndarray,
    picard_tol: float,
    max_iter: int,
    lattice: Lattice,
):
    """Fixed point of y = E + f(y) dt, plain iteration with 0.5 damping once it oscillates."""
    y = E.copy()
    iters = np.zeros(E.shape, dtype=int)
    active = np.ones(E.shape, dtype=bool)
    damping = 1.0
    prev_err = np.inf
    err = np.full(E.shape, np.inf)
    for it in range(1, max_iter + 1):
        y_new = E + dt * np.asarray(driver(level, t, y, Z, U), dtype=float)
        y_new = np.where(active, (1.0 - damping) * y + damping * y_new, y)
        err = np.abs(y_new - y)
        iters[active] = it
        y = y_new
        active = err > picard_tol
        if not np.any(active):
            return y, iters
        worst = float(err.max())
        if worst >= prev_err and damping == 1.0:
            logger.debug(f"Picard iteration oscillates at level {level}; damping by 0.5")
            damping = 0.5
        prev_err = worst
    bad = int(np.argmax(err))
    raise ConvergenceError(
        f"Picard iteration did not contract within {max_iter} iterations at level {level} "
        f"(residual {float(err[bad]):.3g}); dt may be too large for the driver's Lipschitz constant",
        node_id=lattice.node_id(level, bad),
        residual=float(err[bad]),
        stage=get_stage(),
        m_level=get_m_level(),
        subcommand=get_subcommand() or None,
    )


def solve(
    lattice: Lattice,
    generator: Driver,
    terminal: np.ndarray,
    picard_tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    terminal_tag: str = "",
) -> BsdeSolution:
    picard_tol = settings.PICARD_TOL if picard_tol is None else picard_tol
    max_iter = settings.PICARD_MAX_ITER if max_iter is None else max_iter
    n = lattice.n_steps
    terminal = np.asarray(terminal, dtype=float).reshape(-1)
    if terminal.size != lattice.level_size(n):
        raise ShapeError(f"Terminal slice holds {lattice.level_size(n)} nodes, got {terminal.size} values")
    if not np.all(np.isfinite(terminal)):
        raise ShapeError("Terminal values must be finite")

    depends_on_y = bool(getattr(generator, "depends_on_y", True))
    Y: List[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    Z: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    U: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    iterations: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    residuals: List[float] = [0.0] * n
    Y[n] = terminal.copy()

    for i in range(n - 1, -1, -1):
        t = float(lattice.times[i])
        E, Zi, Ui = lattice.project(i, Y[i + 1])
        if depends_on_y:
            Yi, its = _picard_slice(generator, i, t, lattice.dt, E, Zi, Ui, picard_tol, max_iter, lattice)
            f_val = np.asarray(generator(i, t, Yi, Zi, Ui), dtype=float)
        else:
            f_val = np.asarray(generator(i, t, E, Zi, Ui), dtype=float)
            Yi = E + lattice.dt * f_val
            its = np.ones(E.shape, dtype=int)
        residuals[i] = float(np.max(np.abs(Yi - E - f_val * lattice.dt))) if Yi.size else 0.0
        Y[i], Z[i], U[i], iterations[i] = Yi, Zi, Ui, its

    return BsdeSolution(
        lattice, Y, Z, U,
        generator=_label(generator),
        terminal=terminal_tag,
        iterations=iterations,
        residuals=residuals,
    )


def picard_residual(solution: BsdeSolution, lattice: Lattice, generator: Driver) -> float:
    """max over nodes |Y_i - E_i[Y_{i+1}] - f(t_i, Y_i, Z_i, U_i) dt| with the stored Z, U."""
    worst = 0.0
    for i in range(lattice.n_steps):
        E = lattice.expectation(i, solution.Y[i + 1])
        f_val = np.asarray(
            generator(i, float(lattice.times[i]), solution.Y[i], solution.Z[i], solution.U[i]), dtype=float
        )
        worst = max(worst, float(np.max(np.abs(solution.Y[i] - E - f_val * lattice.dt))))
    return worst


def residual_by_level(solution: BsdeSolution, lattice: Lattice, generator: Driver) -> List[np.ndarray]:
    out = []
    for i in range(lattice.n_steps):
        E = lattice.expectation(i, solution.Y[i + 1])
        f_val = np.asarray(
            generator(i, float(lattice.times[i]), solution.Y[i], solution.Z[i], solution.U[i]), dtype=float
        )
        out.append(np.abs(solution.Y[i] - E - f_val * lattice.dt))
    return out


def _worst_node(solution: BsdeSolution, per_level: Sequence[np.ndarray]) -> tuple:
    best_val, best_loc = -np.inf, (0, 0)
    for i, v in enumerate(per_level):
        if v.size and float(v.max()) > best_val:
            best_val, best_loc = float(v.max()), (i, int(np.argmax(v)))
    return best_val, solution.lattice.node_id(*best_loc)


def check_apriori(
    solution: BsdeSolution,
    B_sup: float,
    spec: MarketSpec,
    family: str = "H1",
    slack: float = 1e-10,
) -> AprioriReport:
    """
    Bound report on a solved lattice:
      (i)   C1 <= Y <= C2 for the generator family ("H1": f-type, "H1_prime": recentred f~-type)
      (ii)  |U_i|_inf <= 2 |Y|_inf at every node
      (iii) (1/C) sum E||U||^2 dt <= sum E|U|_alpha dt <= C sum E||U||^2 dt, C = C(alpha, 2|Y|_inf)
    """
    lattice = solution.lattice
    times = lattice.times
    h1 = h1_constants(spec, B_sup, times)
    hp = apriori_constants(spec, B_sup, times)[:2]
    C1, C2 = h1 if family == "H1" else hp
    alt = hp if family == "H1" else h1
    sup_y = solution.sup_abs_Y
    checks: List[BoundCheck] = []

    below = [C1 - y for y in solution.Y]
    above = [y - C2 for y in solution.Y]
    low_val, low_node = _worst_node(solution, below)
    high_val, high_node = _worst_node(solution, above)
    checks.append(BoundCheck(
        name="lower_bound", passed=low_val <= slack, bound=C1,
        worst_value=C1 - low_val, worst_node=low_node,
    ))
    checks.append(BoundCheck(
        name="upper_bound", passed=high_val <= slack, bound=C2,
        worst_value=C2 + high_val, worst_node=high_node,
    ))

    w = spec.grid.w
    if lattice.n_steps and spec.grid.size:
        u_inf = [np.asarray(linf_norm(u, w)).reshape(-1) for u in solution.U]
        excess = [v - 2.0 * sup_y for v in u_inf]
        ex_val, ex_node = _worst_node(solution, excess)
        checks.append(BoundCheck(
            name="jump_sup_bound", passed=ex_val <= slack, bound=2.0 * sup_y,
            worst_value=ex_val + 2.0 * sup_y, worst_node=ex_node,
        ))
    else:
        checks.append(BoundCheck(name="jump_sup_bound", passed=True, bound=2.0 * sup_y, worst_value=0.0))

    C_eq = equivalence_constant(spec.alpha, 2.0 * sup_y)
    if lattice.n_steps and spec.grid.size:
        probs = lattice.all_node_probabilities()
        functional = sum(float(p @ np.asarray(u_alpha_norm(spec.alpha, u, w))) for p, u in zip(probs, solution.U)) * lattice.dt
        l2 = sum(float(p @ np.asarray(l2_norm_sq(u, w))) for p, u in zip(probs, solution.U)) * lattice.dt
    else:
        functional, l2 = 0.0, 0.0
    tol = slack * max(1.0, l2)
    ok = (l2 / C_eq <= functional + tol) and (functional <= C_eq * l2 + tol)
    checks.append(BoundCheck(
        name="equivalence_sandwich", passed=ok, bound=C_eq, worst_value=functional,
        detail=f"sum E|U|_alpha dt={functional:.6g}, sum E||U||^2 dt={l2:.6g}",
    ))

    report = AprioriReport(
        family=family, C1=C1, C2=C2, alternative_C1=alt[0], alternative_C2=alt[1],
        sup_abs_Y=sup_y, equivalence_constant=C_eq, checks=checks,
    )
    if not report.passed:
        failed = [c.name for c in checks if not c.passed]
        logger.warning(f"⚠️ A priori checks failed for {solution.generator}: {failed}")
    return report


def girsanov_min_weight(lattice: Lattice, gammas: Sequence[np.ndarray]) -> float:
    """
    Smallest change-of-measure weight 1 + sum_j gamma_j (1_j - w_j dt) over nodes and branches.

    `gammas[i]` has shape (n_i, J).
    """
    if lattice.grid.size == 0 or not gammas:
        return 1.0
    compensated = lattice.indicators - lattice.grid.w[None, :] * lattice.dt  # (K, J)
    return min(float(np.min(1.0 + g @ compensated.T)) for g in gammas)
