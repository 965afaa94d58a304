"""
Execution Context for run-scoped data.
Uses ContextVar so nested solver calls can see where they are in the pipeline.

Only stores: subcommand, cascade stage and truncation level (needed by error reporting
deep inside the backward induction).
"""
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Dict, Iterator, Optional

# Run-scoped context
run_context: ContextVar[Dict[str, Any]] = ContextVar("run_context", default={})

KEY_SUBCOMMAND = "subcommand"
KEY_STAGE = "stage"
KEY_LEVEL = "m_level"


def get_subcommand() -> str:
    return run_context.get().get(KEY_SUBCOMMAND, "")


def get_stage() -> Optional[int]:
    return run_context.get().get(KEY_STAGE)


def get_m_level() -> Optional[int]:
    return run_context.get().get(KEY_LEVEL)


@contextmanager
def scoped(**values: Any) -> Iterator[None]:
    """Overlay `values` on the current context for the duration of the block."""
    token = run_context.set({**run_context.get(), **values})
    try:
        yield
    finally:
        # Reset to prevent leaking stage info into the next stage
        run_context.reset(token)
