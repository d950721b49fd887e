"""Pure-numpy implementations of the hot kernels.

This is the fallback lane used when numba is unavailable or when
``SPECMIX_BACKEND=numpy`` is set.  Convolution gather/scatter is done with
strided views; the incomplete-gamma family is delegated to scipy.special.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

NAME = "numpy"


def im2col3x3(xpad, cols):
    """Gather 3x3 windows of a padded NHWC tensor into im2col layout.

    xpad : (N, H+2, W+2, C) zero-padded input
    cols : (N*H*W, 9*C) output buffer, row r = (n*H+i)*W+j holds the
           window values ordered (di, dj, c)
    """
    n, hp, wp, c = xpad.shape
    h, w = hp - 2, wp - 2
    win = sliding_window_view(xpad, (3, 3), axis=(1, 2))  # (N,H,W,C,3,3)
    dst = cols.reshape(n, h, w, 3, 3, c)
    np.copyto(dst, win.transpose(0, 1, 2, 4, 5, 3))
    return cols


def col2im3x3_add(gcols, gxpad):
    """Scatter-add im2col gradients back onto the padded input buffer."""
    n, hp, wp, c = gxpad.shape
    h, w = hp - 2, wp - 2
    src = gcols.reshape(n, h, w, 3, 3, c)
    for di in range(3):
        for dj in range(3):
            gxpad[:, di:di + h, dj:dj + w, :] += src[:, :, :, di, dj, :]
    return gxpad


def gamma_cdf(a, x):
    """Regularized lower incomplete gamma P(a, x), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return special.gammainc(a, np.maximum(x, 0.0))


def gamma_log_pdf(a, x):
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return (a - 1.0) * np.log(x) - x - special.gammaln(a)


def gamma_cdf_inv(a, u):
    """Inverse of ``gamma_cdf`` in x, elementwise; u must lie in (0, 1)."""
    a = np.asarray(a, dtype=np.float64)
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-16, 1.0 - 1e-16)
    x = special.gammaincinv(a, u)
    # gammaincinv underflows to 0 for tiny shapes; keep samples strictly positive
    return np.maximum(x, 1e-300)


def gamma_dcdf_da(a, x, rel_h=1e-4, min_h=1e-7):
    """Central-difference derivative of P(a, x) with respect to a."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    h = np.maximum(rel_h * a, min_h)
    return (special.gammainc(a + h, x) - special.gammainc(a - h, x)) / (2.0 * h)
