"""Pick the compiled kernels when importable, else the pure-Python twins.

Set ``V2N_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("V2N_PURE_PYTHON"):
    kernels = _pykernels
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined,no-redef]
    except ImportError:  # pragma: no cover - depends on build
        kernels = _pykernels

BACKEND = "python" if kernels is _pykernels else "cython"
