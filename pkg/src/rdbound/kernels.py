"""Kernel backend selection.

The Cython extension is used for Blahut-Arimoto when it was built;
otherwise the numpy fallback is loaded. Set ``RDBOUND_PURE_PYTHON=1`` to
force the fallback. The smoothing map always uses numpy: its vectorized
ufuncs beat the compiled per-element loop (see benchmarks/bench_kernels.py).
"""

import os

from . import _kernels_py

if os.environ.get("RDBOUND_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

smooth_mu = _kernels_py.smooth_mu
smooth_mu_grad = _kernels_py.smooth_mu_grad
ba_iterate = _impl.ba_iterate

__all__ = ["BACKEND", "smooth_mu", "smooth_mu_grad", "ba_iterate"]
