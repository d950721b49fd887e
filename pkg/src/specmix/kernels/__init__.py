"""Hot-kernel backend selection.

The environment variable ``SPECMIX_BACKEND`` picks the lane:

* ``numba`` -- @njit kernels (default when numba imports cleanly)
* ``numpy`` -- pure numpy/scipy fallback

Both lanes expose the same functions; see ``benchmarks/bench_kernels.py``
for a side-by-side timing comparison.
"""

import os

from . import numpy_impl


def _select():
    choice = os.environ.get("SPECMIX_BACKEND", "").strip().lower()
    if choice == "numpy":
        return numpy_impl
    if choice in ("", "numba"):
        try:
            from . import numba_impl
            return numba_impl
        except ImportError:
            if choice == "numba":
                raise
            return numpy_impl
    raise ValueError(
        f"unknown SPECMIX_BACKEND={choice!r}; expected 'numba' or 'numpy'"
    )


active = _select()

im2col3x3 = active.im2col3x3
col2im3x3_add = active.col2im3x3_add
gamma_cdf = active.gamma_cdf
gamma_log_pdf = active.gamma_log_pdf
gamma_cdf_inv = active.gamma_cdf_inv
gamma_dcdf_da = active.gamma_dcdf_da

BACKEND = active.NAME
