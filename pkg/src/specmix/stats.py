"""Dirichlet and diagonal-Gaussian machinery for the ELBO.

Contains the special functions (Lanczos log-gamma, recurrence/asymptotic
digamma and trigamma), Dirichlet sampling with implicit-reparameterization
pathwise gradients, the closed-form Dirichlet KL divergence, and the
diagonal Gaussian log-likelihood -- both as plain ndarray functions and as
tape ops that integrate with the autodiff graph.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, DomainError, NumericError, ShapeError
from .tensor import Tensor, _accum, _record

ALPHA_FLOOR = 1e-6
SIGMA_FLOOR = 1e-4

_LANCZOS_G = 7.0
_LANCZOS_C = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def lgamma(x):
    """log Gamma(x) for x > 0 via the Lanczos approximation (g=7, n=9)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0):
        raise DomainError("lgamma requires x > 0")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    small = x < 0.5
    # reflection keeps the series argument >= 0.5
    xs = np.where(small, 1.0 - x, x) - 1.0
    acc = np.full(xs.shape, _LANCZOS_C[0])
    for i in range(1, len(_LANCZOS_C)):
        acc += _LANCZOS_C[i] / (xs + i)
    t = xs + _LANCZOS_G + 0.5
    lg = _HALF_LOG_2PI + (xs + 0.5) * np.log(t) - t + np.log(acc)
    out[:] = lg
    if np.any(small):
        out[small] = np.log(np.pi / np.sin(np.pi * x[small])) - lg[small]
    return out[0] if scalar else out


def _shifted(x, min_arg):
    """Apply the recurrence shift x -> x + k until x >= min_arg."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).copy()
    shift_di = np.zeros_like(x)
    shift_tri = np.zeros_like(x)
    for _ in range(int(min_arg)):
        mask = x < min_arg
        if not mask.any():
            break
        shift_di[mask] -= 1.0 / x[mask]
        shift_tri[mask] += 1.0 / (x[mask] * x[mask])
        x[mask] += 1.0
    return x, shift_di, shift_tri


def digamma(x):
    """psi(x) for x > 0: recurrence below 6, asymptotic series above."""
    x0 = np.asarray(x, dtype=np.float64)
    if np.any(x0 <= 0.0):
        raise DomainError("digamma requires x > 0")
    scalar = x0.ndim == 0
    xs, shift, _ = _shifted(x0, 6)
    inv = 1.0 / xs
    inv2 = inv * inv
    series = (np.log(xs) - 0.5 * inv
              - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0
                        - inv2 * (1.0 / 240.0 - inv2 / 132.0)))))
    out = series + shift
    return out[0] if scalar else out.reshape(np.shape(x))


def trigamma(x):
    """psi'(x) for x > 0, same recurrence/asymptotic construction."""
    x0 = np.asarray(x, dtype=np.float64)
    if np.any(x0 <= 0.0):
        raise DomainError("trigamma requires x > 0")
    scalar = x0.ndim == 0
    xs, _, shift = _shifted(x0, 6)
    inv = 1.0 / xs
    inv2 = inv * inv
    series = inv * (1.0 + 0.5 * inv
                    + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0
                              - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)))))
    out = series + shift
    return out[0] if scalar else out.reshape(np.shape(x))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class DirichletParams:
    """Concentration vector; components are clamped at ALPHA_FLOOR."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.maximum(np.asarray(self.alpha, dtype=np.float64), ALPHA_FLOOR)


@dataclass
class DiagGaussianParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma <= 0.0):
            raise ContractError("sigma components must be positive")


def _conc(alpha):
    a = alpha.alpha if isinstance(alpha, DirichletParams) else np.asarray(alpha, dtype=np.float64)
    return np.maximum(a, ALPHA_FLOOR)


# ---------------------------------------------------------------------------
# Dirichlet sampling
# ---------------------------------------------------------------------------

def dirichlet_sample(alpha, rng):
    """Draw a simplex vector via normalized Gamma(alpha_k, 1) draws."""
    a = _conc(alpha)
    g = np.maximum(rng.standard_gamma(a), 1e-300)
    return g / g.sum(axis=-1, keepdims=True)


def _rsample_parts(a, u):
    """Inverse-CDF gamma draws plus the implicit dg/da for each component."""
    g = kernels.gamma_cdf_inv(a, u)
    dfda = kernels.gamma_dcdf_da(a, g)
    log_pdf = kernels.gamma_log_pdf(a, g)
    pdf = np.exp(log_pdf)
    with np.errstate(divide="ignore", invalid="ignore"):
        dgda = np.where(pdf > 0.0, -dfda / pdf, 0.0)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(dgda))):
        bad = np.argwhere(~(np.isfinite(g) & np.isfinite(dgda)))
        i = tuple(bad[0])
        raise NumericError(f"incomplete-gamma evaluation failed at a={a[i]!r}, g={g[i]!r}")
    return g, dgda


def dirichlet_rsample_grad(alpha, rng):
    """Sample z ~ Dir(alpha) and return (z, J) with J[i, j] = dz_i / dalpha_j.

    Gradients are implicit-reparameterization ones: each Gamma draw g_j
    carries dg_j/da_j = -(dF/da)/(dF/dg) with F the regularized lower
    incomplete gamma, then the normalization to the simplex is chained.
    """
    a = _conc(alpha)
    u = rng.random(a.shape)
    g, dgda = _rsample_parts(a, u)
    s = g.sum()
    z = g / s
    k = a.shape[0]
    jac = np.empty((k, k))
    for j in range(k):
        col = -z / s
        col[j] += 1.0 / s
        jac[:, j] = col * dgda[j]
    return z, jac


def dirichlet_score_grad(alpha, z):
    """Score-function gradient d log q(z; alpha) / d alpha (cross-check mode)."""
    a = _conc(alpha)
    return digamma(a.sum(axis=-1, keepdims=True)) - digamma(a) + np.log(z)


# ---------------------------------------------------------------------------
# KL divergence and Gaussian likelihood (ndarray forms)
# ---------------------------------------------------------------------------

def dirichlet_kl(q, p):
    """KL( Dir(q) || Dir(p) ), closed form; batched over leading axes."""
    qa = _conc(q)
    pa = _conc(p)
    if qa.shape[-1] != pa.shape[-1]:
        raise ShapeError(f"KL: component counts differ {qa.shape} vs {pa.shape}")
    q0 = qa.sum(axis=-1)
    p0 = pa.sum(axis=-1)
    val = (lgamma(q0) - lgamma(qa).sum(axis=-1)
           - lgamma(p0) + lgamma(pa).sum(axis=-1)
           + np.sum((qa - pa) * (digamma(qa) - digamma(q0)[..., None]), axis=-1))
    return val


def dirichlet_kl_grad_q(q, p):
    """d KL / d q_m = (q_m - p_m) psi'(q_m) - psi'(q_0) sum_k (q_k - p_k)."""
    qa = _conc(q)
    pa = _conc(p)
    q0 = qa.sum(axis=-1)
    diff = qa - pa
    return diff * trigamma(qa) - trigamma(q0)[..., None] * diff.sum(axis=-1)[..., None]


def gaussian_log_likelihood(x, params_or_mu, sigma=None):
    """Diagonal-Gaussian log density, summed over bands; batched on axis 0."""
    if sigma is None:
        mu, sig = params_or_mu.mu, params_or_mu.sigma
    else:
        mu, sig = np.asarray(params_or_mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mu.shape or mu.shape != sig.shape:
        raise ShapeError(f"gaussian_log_likelihood: x{x.shape} mu{mu.shape} sigma{sig.shape}")
    zscore = (x - mu) / sig
    return np.sum(-_HALF_LOG_2PI - np.log(sig) - 0.5 * zscore * zscore, axis=-1)


# ---------------------------------------------------------------------------
# tape ops
# ---------------------------------------------------------------------------

def dirichlet_rsample_op(alpha, u):
    """Tape op: reparameterized Dirichlet sample from concentrations (N, K).

    `u` is the uniform noise matrix, drawn by the caller so the stream is
    seedable and can be frozen for finite-difference checks.
    """
    a = np.maximum(alpha.data, ALPHA_FLOOR)
    g, dgda = _rsample_parts(a, u)
    s = g.sum(axis=-1, keepdims=True)
    z = g / s
    out = Tensor(z, alpha.requires_grad)

    def vjp(gz):
        dot = np.sum(gz * z, axis=-1, keepdims=True)
        _accum(alpha, dgda * (gz - dot) / s)
    _record(out, vjp)
    return out


def dirichlet_kl_op(q, prior):
    """Tape op: per-row KL( Dir(q) || Dir(prior) ) for q of shape (N, K)."""
    pa = _conc(prior)
    val = dirichlet_kl(q.data, pa)
    grad = dirichlet_kl_grad_q(q.data, pa)
    out = Tensor(val, q.requires_grad)

    def vjp(g):
        _accum(q, g[..., None] * grad)
    _record(out, vjp)
    return out


def gaussian_loglik_op(mu, sigma, x):
    """Tape op: per-row Gaussian log likelihood of fixed data x under (mu, sigma)."""
    xd = np.asarray(x, dtype=np.float64)
    val = gaussian_log_likelihood(xd, mu.data, sigma.data)
    out = Tensor(val, mu.requires_grad or sigma.requires_grad)

    def vjp(g):
        resid = xd - mu.data
        var = sigma.data * sigma.data
        if mu.requires_grad:
            _accum(mu, g[..., None] * resid / var)
        if sigma.requires_grad:
            _accum(sigma, g[..., None] * (resid * resid / (var * sigma.data) - 1.0 / sigma.data))
    _record(out, vjp)
    return out
