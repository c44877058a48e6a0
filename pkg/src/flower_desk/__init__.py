"""Desk-scale rectified-flow action generation with Global-AdaLN conditioning."""
from .threads import apply_thread_cap as _apply_thread_cap

_apply_thread_cap()

__version__ = "0.1.0"
