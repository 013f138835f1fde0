"""Hot numeric kernels with two interchangeable backends.

The numba backend JIT-compiles the scalar traversal loops; the numpy backend
runs the same algorithm with vectorized leaf batches and no compilation. Both
return identical distances. Selection order: explicit argument, then the
SCENELINK_KERNELS environment variable ("numba" or "numpy"), then numba if it
imports, else numpy.
"""
from __future__ import annotations

import os

_BACKENDS = ("numba", "numpy")


def available_backends() -> tuple[str, ...]:
    out = ["numpy"]
    try:
        import numba  # noqa: F401

        out.insert(0, "numba")
    except ImportError:
        pass
    return tuple(out)


def resolve_backend(name: str | None = None) -> str:
    """Pick the kernel backend; raises on an explicit request that can't be met."""
    if name is None:
        name = os.environ.get("SCENELINK_KERNELS")
    if name is None:
        return available_backends()[0]
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {_BACKENDS}")
    if name == "numba" and "numba" not in available_backends():
        raise RuntimeError("numba backend requested but numba is not importable")
    return name


def get_kernels(name: str | None = None):
    """Return the kernel module for `name` (resolved per `resolve_backend`)."""
    backend = resolve_backend(name)
    if backend == "numba":
        from . import _numba_impl

        return _numba_impl
    from . import _numpy_impl

    return _numpy_impl
