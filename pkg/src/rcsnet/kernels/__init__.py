"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist:

* ``numba`` -- jitted direct loops (default when numba imports cleanly)
* ``numpy`` -- im2col + single-precision BLAS matmul

Set ``RCSNET_BACKEND=numpy`` or ``RCSNET_BACKEND=numba`` to force one;
anything else (or unset) means auto. ``RCSNET_THREADS`` caps the numba
thread pool. Both backends accumulate in float32; they may differ by
normal summation-order rounding (~1e-6 relative), never more.
"""

import os

from . import np_kernels

_choice = os.environ.get("RCSNET_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"RCSNET_BACKEND must be 'numba', 'numpy' or unset, got {_choice!r}"
    )

if _choice in ("auto", "numba"):
    try:
        import numba as _numba

        from . import nb_kernels as _impl

        BACKEND = "numba"
        _threads = os.environ.get("RCSNET_THREADS", "")
        if _threads.isdigit() and int(_threads) > 0:
            _numba.set_num_threads(
                min(int(_threads), _numba.config.NUMBA_NUM_THREADS)
            )
    except ImportError:
        if _choice == "numba":
            raise
        _impl = np_kernels
        BACKEND = "numpy"
else:
    _impl = np_kernels
    BACKEND = "numpy"

conv2d = _impl.conv2d
maxpool2d = _impl.maxpool2d


def backend_name():
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return BACKEND
