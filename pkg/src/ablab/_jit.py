"""Numba switch.

Set ``ABLAB_DISABLE_JIT=1`` to run every kernel through its pure-numpy path.
The flag is read once at import; :func:`set_backend` flips it afterwards
(tests and the benchmark use that to compare both paths in one process).
"""
from __future__ import annotations

import os
from typing import Any, Callable

try:
    from numba import njit as _numba_njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def _numba_njit(*args: Any, **kwargs: Any) -> Callable:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_disabled() -> bool:
    return os.environ.get("ABLAB_DISABLE_JIT", "").strip().lower() in {"1", "true", "yes", "on"}


_state = {"use_numba": HAVE_NUMBA and not _env_disabled()}


def njit(*args: Any, **kwargs: Any) -> Callable:
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return _numba_njit(*args, **kwargs)


def use_numba() -> bool:
    return _state["use_numba"]


def set_backend(name: str) -> None:
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _state["use_numba"] = name == "numba"


def backend() -> str:
    return "numba" if _state["use_numba"] else "numpy"
