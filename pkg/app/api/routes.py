from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from app.controllers.bsde_solver import BsdeSolution
from app.controllers.cascade import solve_quadratic
from app.controllers.lattice import Lattice, build
from app.controllers.market import MarketSpec, market_from_config, terminal_liability
from app.controllers.utility import optimal_strategy, value_function, verify_optimality
from app.controllers.validation import run_validation
from app.core.artifact_store import ArtifactStore
from app.core.exceptions import ConfigurationError, ValidationFailure
from app.core.execution_context import scoped
from app.models.context import RunContext
from app.models.schemas import RunConfig

load_dotenv()
import logging

logger = logging.getLogger(__name__)

# Subcommand names
CMD_SOLVE = "solve"
CMD_CASCADE_TRACE = "cascade-trace"
CMD_VALIDATE = "validate"
CMD_OPTIMIZE = "optimize"

# Artifact names
SOLUTION_CSV = "solution.csv"
SUMMARY_JSON = "summary.json"
TRACE_JSON = "cascade_trace.json"
VALIDATION_JSON = "validation_report.json"
OPTIMALITY_JSON = "optimality_report.json"
STRATEGY_CSV = "strategy.csv"


# ============ SETUP ============

def build_problem(config: RunConfig) -> Tuple[MarketSpec, Lattice, np.ndarray]:
    """Market, lattice and terminal liability B_bar from a run config."""
    spec = market_from_config(config.market.model_dump())
    lattice = build(config.lattice.n_steps, spec.grid, spec.T, config.lattice.mode)
    prices = lattice.price_levels(spec)[-1]
    B_bar = terminal_liability(config.terminal.model_dump(), prices)
    return spec, lattice, B_bar


def _solve(config: RunConfig, spec: MarketSpec, lattice: Lattice, B_bar: np.ndarray, keep_stages: bool = False) -> BsdeSolution:
    return solve_quadratic(
        lattice,
        spec,
        B_bar,
        m_schedule=config.cascade.m_schedule,
        N_override=config.cascade.N_override,
        picard_tol=config.solver.picard_tol,
        max_iter=config.solver.max_iter,
        keep_stages=keep_stages,
    )


def _store(ctx: RunContext) -> ArtifactStore:
    return ArtifactStore(ctx.out_dir, ctx.config.output.formats)


# ============ HANDLERS ============

def run_solve(ctx: RunContext) -> Dict[str, Any]:
    config = ctx.config
    spec, lattice, B_bar = build_problem(config)
    solution = _solve(config, spec, lattice, B_bar)
    store = _store(ctx)
    store.write_csv(SOLUTION_CSV, solution.to_frame())
    summary = solution.summary()
    store.write_json(SUMMARY_JSON, summary)
    logger.info(f"✅ solve: Y0={summary.Y0:.10g} on {lattice}")
    return {"Y0": summary.Y0, "heuristic": summary.heuristic, **store.manifest()}


def run_cascade_trace(ctx: RunContext) -> Dict[str, Any]:
    config = ctx.config
    spec, lattice, B_bar = build_problem(config)
    solution = _solve(config, spec, lattice, B_bar)
    report = solution.trace.to_report()
    store = _store(ctx)
    store.write_json(TRACE_JSON, report)
    store.write_csv(SOLUTION_CSV, solution.to_frame())
    logger.info(f"✅ cascade-trace: N={report.N}, {len(report.stages)} stages recorded")
    return {"N": report.N, "heuristic": report.heuristic, **store.manifest()}


def run_validate(ctx: RunContext) -> Dict[str, Any]:
    config = ctx.config
    spec, lattice, B_bar = build_problem(config)
    report = run_validation(
        spec,
        lattice,
        B_bar,
        config.validate_,
        m_schedule=config.cascade.m_schedule,
        N_override=config.cascade.N_override,
        picard_tol=config.solver.picard_tol,
        max_iter=config.solver.max_iter,
    )
    store = _store(ctx)
    store.write_json(VALIDATION_JSON, report)
    if not report.passed:
        failed = [c.name for c in report.checks if not c.passed]
        raise ValidationFailure(f"{len(failed)} validation check(s) failed: {', '.join(failed)}", failed=failed)
    return {"passed": True, **store.manifest()}


def run_optimize(ctx: RunContext, x: Optional[float] = None) -> Dict[str, Any]:
    config = ctx.config
    if config.mc is None:
        raise ConfigurationError("mc: the optimize subcommand needs an mc block with a seed", pointer="/mc")
    x = config.optimize.x if x is None else float(x)
    spec, lattice, B_bar = build_problem(config)
    solution = _solve(config, spec, lattice, B_bar)
    report = verify_optimality(
        spec,
        lattice,
        solution,
        x,
        paths=config.mc.paths,
        seed=config.mc.seed,
        n_random=config.optimize.random_strategies,
    )
    store = _store(ctx)
    store.write_json(OPTIMALITY_JSON, report)
    store.write_csv(STRATEGY_CSV, optimal_strategy(solution, spec, lattice).to_frame())
    summary = solution.summary().model_dump(mode="json")
    summary["x"] = x
    summary["V"] = value_function(solution.Y0, x, spec.alpha)
    store.write_json(SUMMARY_JSON, summary)
    if not report.passed:
        logger.warning("⚠️ optimize: optimality checks did not all pass; see the report")
    return {"V": summary["V"], "passed": report.passed, **store.manifest()}


_COMMANDS: Dict[str, Callable[[RunContext], Dict[str, Any]]] = {
    CMD_SOLVE: run_solve,
    CMD_CASCADE_TRACE: run_cascade_trace,
    CMD_VALIDATE: run_validate,
    CMD_OPTIMIZE: run_optimize,
}

SUBCOMMANDS = tuple(_COMMANDS)


def dispatch(ctx: RunContext) -> Dict[str, Any]:
    handler = _COMMANDS.get(ctx.subcommand)
    if handler is None:
        raise ConfigurationError(f"Unknown subcommand {ctx.subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    with scoped(subcommand=ctx.subcommand):
        logger.info(f"Running {ctx.subcommand} with {ctx.config_path} -> {ctx.out_dir}")
        return handler(ctx)
