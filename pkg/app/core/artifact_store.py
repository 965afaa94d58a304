"""
Atomic artifact writer for run outputs.

Files are written to a temporary sibling and moved into place with os.replace, so a reader
never sees a half-written artifact. A process-wide lock serializes the writes.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from typing import Any, Dict, List, Optional

import pandas as pd
from pydantic import BaseModel

from app.core.config import settings

logger = logging.getLogger(__name__)

_WRITE_LOCK = threading.Lock()


class ArtifactStore:
    def __init__(self, out_dir: str, formats: Optional[List[str]] = None):
        self.out_dir = out_dir
        self.formats = set(formats or ["csv", "json"])
        self.written: List[str] = []

    def _atomic_write(self, name: str, payload: str) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        target = os.path.join(self.out_dir, name)
        with _WRITE_LOCK:
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out_dir)
            try:
                with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                    fh.write(payload)
                os.replace(tmp, target)
            except BaseException:
                if os.path.exists(tmp):
                    os.remove(tmp)
                raise
        self.written.append(target)
        logger.info(f"📤 Wrote {target}")
        return target

    def write_json(self, name: str, data: Any) -> str:
        if "json" not in self.formats:
            return ""
        if isinstance(data, BaseModel):
            data = data.model_dump(mode="json")
        return self._atomic_write(name, json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        if "csv" not in self.formats:
            return ""
        return self._atomic_write(name, frame.to_csv(index=False, float_format=settings.CSV_FLOAT_FORMAT))

    def manifest(self) -> Dict[str, Any]:
        return {"out_dir": self.out_dir, "files": [os.path.basename(p) for p in self.written]}
