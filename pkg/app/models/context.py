from pydantic import BaseModel
from typing import Dict, Any, Optional

from app.models.schemas import RunConfig


class RunContext(BaseModel):
    """
    Everything a subcommand handler needs: the parsed config, where it came from and where
    artifacts go. The --out flag wins over output.dir of the config.
    """
    subcommand: str
    config_path: str
    config: RunConfig
    out_dir_override: Optional[str] = None

    @property
    def out_dir(self) -> str:
        return self.out_dir_override or self.config.output.dir

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "config_path": self.config_path,
            "out_dir": self.out_dir,
        }
