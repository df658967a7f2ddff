"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the NumPy
fallback.  ``PAIRTRACE_KERNELS=python`` forces the fallback at import time
and :func:`set_backend` switches at runtime (tests run both).
"""

from __future__ import annotations

import os
from contextlib import contextmanager

from pairtrace import _pure

try:
    from pairtrace import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

_NAMES = ("cluster_labels", "centroid_reduce", "delay_histogram", "candidate_pairs", "greedy_match", "bin_rays")

backend = ""


def available_backends() -> list[str]:
    return ["cython", "python"] if _compiled is not None else ["python"]


def set_backend(name: str) -> None:
    global backend
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .` with a C compiler")
        impl = _compiled
    elif name == "python":
        impl = _pure
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(impl, fn)
    backend = name


@contextmanager
def using(name: str):
    previous = backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _default() -> str:
    forced = os.environ.get("PAIRTRACE_KERNELS", "").strip().lower()
    if forced in ("python", "pure", "numpy"):
        return "python"
    return "cython" if _compiled is not None else "python"


set_backend(_default())
