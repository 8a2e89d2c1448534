"""Kernel backend selection.

The convolution hot paths (patch extraction / scatter-add) exist twice:
a numba @njit implementation and a pure-numpy one.  The numba path is
the default whenever numba imports cleanly; set ``ZEPAD_NUMBA=0`` to
force the numpy fallback (useful for debugging and for the benchmark
in ``benchmarks/bench_kernels.py``).
"""

import os

from . import numpy_kernels

_FLAG = os.environ.get("ZEPAD_NUMBA", "1").strip().lower()

if _FLAG in ("0", "false", "no", "off"):
    _impl = numpy_kernels
    NUMBA_ENABLED = False
else:
    try:
        from . import numba_kernels as _impl

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        _impl = numpy_kernels
        NUMBA_ENABLED = False

im2col = _impl.im2col
col2im = _impl.col2im
conv_out_size = numpy_kernels.conv_out_size


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
