"""Kernel backend switch.

Hot loops (convolutions, resampling) have two implementations: a numba
``@njit`` kernel and a vectorised numpy fallback.  The numba path is used
when numba imports and ``MUSCLESEG_NUMBA`` is not set to a false value.
"""
from __future__ import annotations

import contextlib
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency, but keep the fallback usable
    numba = None

_FALSE = {"0", "false", "no", "off"}
# no "nnan"/"ninf": non-finite values must propagate so training can detect them
_FASTMATH = {"reassoc", "contract", "arcp", "nsz", "afn"}

HAVE_NUMBA = numba is not None
_use_numba = HAVE_NUMBA and os.environ.get("MUSCLESEG_NUMBA", "1").strip().lower() not in _FALSE


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=_FASTMATH, nogil=True)(fn)


def use_numba() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


def backend() -> str:
    return "numba" if _use_numba else "numpy"


@contextlib.contextmanager
def backend_scope(name: str):
    prev = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)
