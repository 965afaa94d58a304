from pydantic import BaseModel, ConfigDict, Field, ValidationError
from typing import List, Optional, Dict, Any, Union, Literal
import json

from app.core.config import settings
from app.core.exceptions import ConfigurationError

# ============ RUN CONFIGURATION ============

class CoefficientTable(BaseModel):
    model_config = ConfigDict(extra="forbid")
    breakpoints: List[float]
    values: List[float]

CoefficientInput = Union[float, CoefficientTable]

class JumpAtom(BaseModel):
    model_config = ConfigDict(extra="forbid")
    x: float
    w: float

class ConstraintBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    lo: float
    hi: float

class MarketBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    b: CoefficientInput
    sigma: CoefficientInput
    beta: Union[CoefficientInput, List[CoefficientInput]] = 0.0
    jumps: List[JumpAtom] = []
    alpha: float = Field(gt=0)
    T: float = Field(gt=0)
    constraint: ConstraintBlock
    s0: float = Field(default=100.0, gt=0)

class LatticeBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n_steps: int = Field(ge=0)
    mode: Literal["tree", "markov"] = "tree"

class TerminalBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["constant", "call", "table"] = "constant"
    value: float = 0.0          # constant
    strike: Optional[float] = None  # call
    cap: Optional[float] = None     # call
    values: Optional[List[float]] = None  # table

class SolverBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    picard_tol: float = Field(default_factory=lambda: settings.PICARD_TOL, gt=0)
    max_iter: int = Field(default_factory=lambda: settings.PICARD_MAX_ITER, ge=1)

class CascadeBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    m_schedule: List[Optional[int]] = Field(default_factory=lambda: list(settings.DEFAULT_M_SCHEDULE))
    N_override: Optional[int] = Field(default=None, ge=1)

class McBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    paths: int = Field(default=100_000, ge=1)
    seed: int

class OutputBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    dir: str = "output"
    formats: List[Literal["csv", "json"]] = ["csv", "json"]

class OptimizeBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    x: float = 0.0
    random_strategies: int = Field(default=20, ge=0)

class ValidateBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    samples: int = Field(default=2_000, ge=1)
    comparison_pairs: int = Field(default=20, ge=0)
    truncation_levels: List[int] = [1, 2, 4]
    seed: int = 0

class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    market: MarketBlock
    lattice: LatticeBlock
    terminal: TerminalBlock = TerminalBlock()
    solver: SolverBlock = SolverBlock()
    cascade: CascadeBlock = CascadeBlock()
    mc: Optional[McBlock] = None
    output: OutputBlock = OutputBlock()
    optimize: OptimizeBlock = OptimizeBlock()
    validate_: ValidateBlock = Field(default_factory=ValidateBlock, alias="validate")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        try:
            config = cls.model_validate(raw)
        except ValidationError as exc:
            first = exc.errors()[0]
            loc = ["validate" if part == "validate_" else str(part) for part in first["loc"]]
            pointer = "/" + "/".join(loc)
            raise ConfigurationError(
                f"{'.'.join(loc)}: {first['msg']}", pointer=pointer
            ) from exc
        config._check_semantics()
        return config

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"Config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"Config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("Config root must be a JSON object", pointer="")
        return cls.from_dict(raw)

    def _check_semantics(self) -> None:
        c = self.market.constraint
        if c.lo > c.hi:
            raise ConfigurationError(
                f"market.constraint.lo: lo={c.lo} exceeds hi={c.hi}", pointer="/market/constraint/lo"
            )
        if c.lo > 0:
            raise ConfigurationError(
                "market.constraint.lo: the constraint interval must contain 0", pointer="/market/constraint/lo"
            )
        if c.hi < 0:
            raise ConfigurationError(
                "market.constraint.hi: the constraint interval must contain 0", pointer="/market/constraint/hi"
            )
        for i, atom in enumerate(self.market.jumps):
            if atom.x == 0:
                raise ConfigurationError(f"market.jumps.{i}.x: jump size cannot be 0", pointer=f"/market/jumps/{i}/x")
            if atom.w < 0:
                raise ConfigurationError(f"market.jumps.{i}.w: weight must be nonnegative", pointer=f"/market/jumps/{i}/w")
        if isinstance(self.market.beta, list) and len(self.market.beta) != len(self.market.jumps):
            raise ConfigurationError(
                f"market.beta: {len(self.market.beta)} coefficients for {len(self.market.jumps)} atoms",
                pointer="/market/beta",
            )
        for name in ("b", "sigma"):
            raw = getattr(self.market, name)
            if isinstance(raw, CoefficientTable) and len(raw.values) != len(raw.breakpoints) + 1:
                raise ConfigurationError(
                    f"market.{name}.values: needs one more value than breakpoints", pointer=f"/market/{name}/values"
                )
        levels = self.cascade.m_schedule
        if not levels:
            raise ConfigurationError("cascade.m_schedule: at least one level required", pointer="/cascade/m_schedule")
        finite = [m for m in levels if m is not None]
        if None in levels[:-1]:
            raise ConfigurationError(
                "cascade.m_schedule: null (no truncation) may only be the last level", pointer="/cascade/m_schedule"
            )
        if any(m < 1 for m in finite) or any(b <= a for a, b in zip(finite, finite[1:])):
            raise ConfigurationError(
                "cascade.m_schedule: levels must be strictly increasing positive integers",
                pointer="/cascade/m_schedule",
            )
        if self.terminal.kind == "call" and self.terminal.strike is None:
            raise ConfigurationError("terminal.strike: required for a call payoff", pointer="/terminal/strike")
        if self.terminal.kind == "table" and not self.terminal.values:
            raise ConfigurationError("terminal.values: required for a table payoff", pointer="/terminal/values")
        if self.lattice.mode == "markov":
            tables = [self.market.b, self.market.sigma]
            tables += self.market.beta if isinstance(self.market.beta, list) else [self.market.beta]
            if any(isinstance(t, CoefficientTable) and len(set(t.values)) > 1 for t in tables):
                raise ConfigurationError(
                    "lattice.mode: markov mode needs time-constant coefficients", pointer="/lattice/mode"
                )
            if self.terminal.kind == "table":
                raise ConfigurationError(
                    "terminal.kind: table payoffs are indexed by tree nodes; use tree mode", pointer="/terminal/kind"
                )

    def to_json(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

# ============ REPORTS ============

class BoundCheck(BaseModel):
    name: str
    passed: bool
    bound: Optional[float] = None
    worst_value: Optional[float] = None
    worst_node: Optional[str] = None
    detail: Optional[str] = None

class AprioriReport(BaseModel):
    family: str
    C1: float
    C2: float
    alternative_C1: float
    alternative_C2: float
    sup_abs_Y: float
    equivalence_constant: float
    checks: List[BoundCheck] = []

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

class SolveSummary(BaseModel):
    generator: str
    terminal: str
    n_steps: int
    mode: str
    Y0: float
    sup_abs_Y: float
    max_residual: float
    max_iterations: int
    total_iterations: int
    heuristic: bool = False
    apriori: Optional[AprioriReport] = None

class LevelDiagnostics(BaseModel):
    m: Optional[int]
    Y0: float
    sup_abs_Y: float
    bound: float
    bound_ok: bool
    max_residual: float

class StageRecord(BaseModel):
    k: int
    N: int
    Y0: float
    sup_abs_Y: float
    bound: float
    bound_ok: bool
    telescoping_residual: float
    monotone_gap: float
    running_sum_monotone_gap: float
    cauchy_Z: List[float] = []
    cauchy_U: List[float] = []
    levels: List[LevelDiagnostics] = []

class CascadeTraceReport(BaseModel):
    M_B: float
    shift: float
    alpha: float
    equivalence_constant: float
    N_stage1: int
    N_stage2: int
    N: int
    N_override: Optional[int] = None
    heuristic: bool = False
    thresholds: Dict[str, float]
    m_schedule: List[Optional[int]]
    assembled_residual: float
    transported_residual: Optional[float] = None
    stages: List[StageRecord] = []

class StrategyVerdict(BaseModel):
    id: str
    estimate: float
    se: float
    verdict: bool
    mode: str = "monte_carlo"

class OptimalityReport(BaseModel):
    V_formula: float
    V_mc_estimate: float
    V_mc_se: float
    x: float
    Y_bar_0: float
    Y_hat_0: float
    value_gap: float
    per_strategy: List[StrategyVerdict] = []
    A_max_abs_optimal: float
    A_min_random: float
    supermartingale_worst_gap: float
    martingale_max_abs_gap: float
    bsde_martingale_max_abs_gap: float = 0.0
    nested_worst_gap: float
    ui_bound_ok: bool
    exact_mode: str
    passed: bool

class ValidationCheck(BaseModel):
    name: str
    passed: bool
    violations: int = 0
    worst: Optional[float] = None
    detail: Optional[str] = None

class ValidationReport(BaseModel):
    passed: bool
    checks: List[ValidationCheck] = []
