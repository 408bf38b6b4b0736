"""Compositing backend selection.

The compiled extension is preferred; the numpy fallback is used when it is
missing (source checkout without a build, unsupported platform). Both expose
the same two functions with identical semantics. `use_backend` lets tests and
benchmarks pin a specific one.
"""

from __future__ import annotations

import contextlib

from . import _compositing_py

try:
    from . import _compositing as _compiled
except ImportError:  # pragma: no cover - depends on the build environment
    _compiled = None

_BACKENDS = {"python": _compositing_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = "compiled" if _compiled is not None else "python"


def backend_name() -> str:
    return _active


def available_backends() -> tuple:
    return tuple(sorted(_BACKENDS))


def composite_forward(*args, **kwargs):
    return _BACKENDS[_active].composite_forward(*args, **kwargs)


def composite_backward(*args, **kwargs):
    return _BACKENDS[_active].composite_backward(*args, **kwargs)


@contextlib.contextmanager
def use_backend(name: str):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(_BACKENDS)}")
    previous = _active
    _active = name
    try:
        yield
    finally:
        _active = previous
