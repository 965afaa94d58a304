from typing import List, Optional
from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    PROJECT_NAME: str = "Quadratic BSDE Jump Utility"
    LOG_LEVEL: str = "INFO"

    # Backward induction
    PICARD_TOL: float = 1e-10
    PICARD_MAX_ITER: int = 200
    MINIMIZE_TOL: float = 1e-9

    # Lattice limits (full tree grows like (2(1+J))^n)
    MAX_TREE_STEPS: int = 20
    MAX_TREE_NODES: int = 4_000_000

    # Cascade
    N_STAGE_CAP: int = 10_000
    DEFAULT_M_SCHEDULE: List[Optional[int]] = [1, 4, None]

    # Monte Carlo / output
    MC_CHUNK_SIZE: int = 50_000
    CSV_FLOAT_FORMAT: str = "%.17g"

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

settings = Settings()
