"""Classical unmixing baselines: VCA endmember extraction and FCLS abundances.

FCLS is built on a Lawson-Hanson active-set NNLS over the sum-to-one
augmented system, the standard construction: the augmented row weight
makes the simplex constraint dominate, and the solution is renormalized
so the constraint holds to machine precision.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegeneracyError

NNLS_TOL = 1e-12
RIDGE = 1e-10


def nnls(a, b, max_iter=None, tol=NNLS_TOL, ridge=0.0):
    """Lawson-Hanson active-set NNLS: min ||a x - b|| subject to x >= 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = a.shape
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)

    def solve_passive(mask):
        ap = a[:, mask]
        if ridge > 0.0:
            gram = ap.T @ ap + ridge * np.eye(ap.shape[1])
            return np.linalg.solve(gram, ap.T @ b)
        return np.linalg.lstsq(ap, b, rcond=None)[0]

    for _ in range(max_iter):
        w = a.T @ (b - a @ x)
        w[passive] = -np.inf
        if np.all(passive) or np.max(w) <= tol:
            break
        passive[int(np.argmax(w))] = True
        z = np.zeros(n)
        z[passive] = solve_passive(passive)
        while np.min(z[passive]) <= 0.0:
            neg = passive & (z <= 0.0)
            denom = x[neg] - z[neg]
            # x_i = z_i = 0 gives 0/0; that index leaves the passive set at
            # step length 0, matching the x_i/(x_i - z_i) -> 0 limit
            ratio = np.where(denom > 0.0, x[neg] / np.where(denom > 0.0, denom, 1.0), 0.0)
            alpha = np.min(ratio)
            x = x + alpha * (z - x)
            passive &= x > 0.0
            z = np.zeros(n)
            if not passive.any():
                break
            z[passive] = solve_passive(passive)
        x = z
    rnorm = float(np.linalg.norm(a @ x - b))
    return x, rnorm


@dataclass
class FclsSolution:
    abundances: np.ndarray
    residual_norm: float


def fcls(spectrum, endmembers, delta=None, _checked=False):
    """Fully constrained least squares: z >= 0 and sum(z) = 1.

    Solves the sum-to-one augmented NNLS with row weight delta
    (default 1e3 * max|E|), then renormalizes so ASC holds exactly.
    Linearly dependent endmembers trigger a conditioning warning and a
    ridge-regularized solve.
    """
    endmembers = np.asarray(endmembers, dtype=np.float64)
    spectrum = np.asarray(spectrum, dtype=np.float64)
    k, b = endmembers.shape
    if k > b:
        raise ContractError(f"fcls needs K <= B, got K={k}, B={b}")
    ridge = 0.0
    if not _checked:
        if _rank_deficient(endmembers):
            warnings.warn("endmember matrix is rank deficient; solving with ridge "
                          f"regularization {RIDGE:g}", RuntimeWarning, stacklevel=2)
            ridge = RIDGE
    elif _checked == "ridge":
        ridge = RIDGE
    if delta is None:
        delta = 1e3 * np.max(np.abs(endmembers))
    a = np.vstack([endmembers.T, np.full((1, k), delta)])
    rhs = np.concatenate([spectrum, [delta]])
    z, _ = nnls(a, rhs, ridge=ridge)
    total = z.sum()
    if total <= 0.0:
        z = np.full(k, 1.0 / k)
    else:
        z = z / total
    rnorm = float(np.linalg.norm(endmembers.T @ z - spectrum))
    return FclsSolution(z, rnorm)


def _rank_deficient(endmembers):
    s = np.linalg.svd(endmembers, compute_uv=False)
    return s[-1] <= s[0] * 1e-10


def vca(pixels, k, seed=0):
    """Vertex component analysis: pick K extreme pixels of the data simplex.

    Projects the data onto its top-K singular subspace with projective
    normalization, then repeatedly draws a direction orthogonal to the
    span of the selected vertices and takes the pixel with the largest
    absolute projection.  Returns the selected pixel spectra (K, B).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels.reshape(-1, pixels.shape[-1])
    n, b = pixels.shape
    if k < 2:
        raise ContractError(f"vca needs K >= 2, got {k}")
    if n < k:
        raise ContractError(f"vca needs at least K={k} pixels, got {n}")
    y = pixels.T  # (B, N)
    # top-K subspace of the (uncentered) correlation
    u, s, _ = np.linalg.svd(y @ y.T / n)
    if s[k - 1] <= s[0] * 1e-12:
        raise DegeneracyError(f"data spans fewer than K={k} dimensions")
    ud = u[:, :k]
    x = ud.T @ y  # (K, N)
    u_mean = x.mean(axis=1, keepdims=True)
    proj = np.sum(x * u_mean, axis=0)
    proj[proj == 0.0] = 1e-300
    yproj = x / proj

    rng = np.random.default_rng(seed)
    indices = np.zeros(k, dtype=int)
    a = np.zeros((k, k))
    a[-1, 0] = 1.0
    for i in range(k):
        w = rng.standard_normal((k, 1))
        f = w - a @ (np.linalg.pinv(a) @ w)
        f = f / np.linalg.norm(f)
        v = (f.T @ yproj).ravel()
        indices[i] = int(np.argmax(np.abs(v)))
        a[:, i] = yproj[:, indices[i]]
    return pixels[indices].copy(), indices


def vca_fcls_pipeline(cube, k, seed=0, threads=1):
    """VCA endmembers followed by per-pixel FCLS abundances.

    cube : (H, W, B) reflectance volume
    Returns (endmembers (K, B), abundance map (H, W, K)).
    """
    cube = np.asarray(cube, dtype=np.float64)
    h, w, b = cube.shape
    pixels = cube.reshape(-1, b)
    endm, _ = vca(pixels, k, seed=seed)
    checked = "ridge" if _rank_deficient(endm) else True
    if checked == "ridge":
        warnings.warn("VCA endmembers are rank deficient; FCLS will use ridge "
                      f"regularization {RIDGE:g}", RuntimeWarning, stacklevel=2)

    def solve_range(lo, hi):
        out = np.empty((hi - lo, k))
        for i in range(lo, hi):
            out[i - lo] = fcls(pixels[i], endm, _checked=checked).abundances
        return out

    npix = pixels.shape[0]
    if threads <= 1:
        abund = solve_range(0, npix)
    else:
        chunk = (npix + threads - 1) // threads
        ranges = [(lo, min(lo + chunk, npix)) for lo in range(0, npix, chunk)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda r: solve_range(*r), ranges))
        abund = np.vstack(parts)
    return endm, abund.reshape(h, w, k)
