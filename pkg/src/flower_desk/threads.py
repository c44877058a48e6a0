"""Worker-count cap from ``FLOWER_DESK_THREADS``.

Imported before numpy so the BLAS pools pick the cap up at start-up.
"""
from __future__ import annotations

import os

ENV_VAR = "FLOWER_DESK_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def configured_threads() -> int | None:
    """The requested cap, or None when unset. Raises ValueError on junk."""
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def apply_thread_cap() -> int | None:
    try:
        n = configured_threads()
    except ValueError:
        return None  # reported by the CLI, which exits with a usage error
    if n is not None:
        for var in _BLAS_VARS:
            os.environ[var] = str(n)
    return n
