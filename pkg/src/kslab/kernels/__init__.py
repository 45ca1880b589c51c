"""Hot-loop kernels with two interchangeable backends.

The env var KSLAB_BACKEND selects at import time:
  auto  (default) use numba when importable, else fall back to numpy
  numba require the compiled backend, raise if unavailable
  numpy force the pure-numpy reference implementation

``BACKEND`` names the backend actually in use. benchmarks/bench_kernels.py
compares the two.
"""

import os

from . import numpy_impl

_choice = os.environ.get("KSLAB_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        "KSLAB_BACKEND must be one of auto|numba|numpy, got %r" % _choice
    )

if _choice in ("auto", "numba"):
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        _impl = numpy_impl
        BACKEND = "numpy"
else:
    _impl = numpy_impl
    BACKEND = "numpy"

temporal_energy = _impl.temporal_energy
temporal_energy_grad = _impl.temporal_energy_grad
tv_smooth_energy = _impl.tv_smooth_energy
tv_smooth_energy_grad = _impl.tv_smooth_energy_grad
tv_aniso = _impl.tv_aniso
maxpool2_fwd = _impl.maxpool2_fwd
maxpool2_bwd = _impl.maxpool2_bwd
upsample2_fwd = _impl.upsample2_fwd
upsample2_bwd = _impl.upsample2_bwd

__all__ = [
    "BACKEND",
    "temporal_energy",
    "temporal_energy_grad",
    "tv_smooth_energy",
    "tv_smooth_energy_grad",
    "tv_aniso",
    "maxpool2_fwd",
    "maxpool2_bwd",
    "upsample2_fwd",
    "upsample2_bwd",
]
