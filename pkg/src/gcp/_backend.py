"""Kernel backend selection.

Numba-compiled kernels are used when numba imports and the environment
variable ``GCP_DISABLE_NUMBA`` is unset (or ``0``); otherwise the pure-numpy
implementations run. Both produce the same results up to float rounding.
"""
from __future__ import annotations

import contextlib
import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("GCP_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")


_state = {"backend": "numpy" if (_env_disabled() or not HAVE_NUMBA) else "numba"}


def backend() -> str:
    return _state["backend"]


def set_backend(name: str) -> None:
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _state["backend"] = name


@contextlib.contextmanager
def use_backend(name: str):
    old = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)
