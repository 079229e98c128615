"""Hot-kernel dispatch.

Two interchangeable backends: numba-jitted loops (default when numba
imports) and pure numpy. Select explicitly with METRICCAM_BACKEND=numba
or METRICCAM_BACKEND=numpy. Both are single-threaded and deterministic;
equal-seed runs under one backend are bit-identical.
"""

import os

from ..errors import DomainError
from . import _numpy as numpy_backend

try:
    from . import _numba as numba_backend
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba_backend = None
    HAS_NUMBA = False


def _resolve():
    want = os.environ.get("METRICCAM_BACKEND", "").strip().lower()
    if want == "numpy":
        return "numpy"
    if want == "numba":
        if not HAS_NUMBA:
            raise DomainError("METRICCAM_BACKEND=numba but numba is not importable")
        return "numba"
    if want:
        raise DomainError(f"unknown METRICCAM_BACKEND {want!r} (use 'numba' or 'numpy')")
    return "numba" if HAS_NUMBA else "numpy"


BACKEND = _resolve()
_mod = numba_backend if BACKEND == "numba" else numpy_backend

render_scene = _mod.render_scene
conv2d_forward = _mod.conv2d_forward
conv2d_backward_input = _mod.conv2d_backward_input
conv2d_backward_params = _mod.conv2d_backward_params
brute_nn = _mod.brute_nn
grid_nn = _mod.grid_nn
build_grid = numpy_backend.build_grid


def backend_name() -> str:
    return BACKEND
