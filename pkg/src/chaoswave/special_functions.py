"""Scalar special functions.

Probabilists' Hermite polynomials, the excursion coefficients J_q, sphere
measures, chi moments, Legendre polynomials and real spherical harmonics.
All functions broadcast over numpy arrays where that makes sense.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, ndtr

HERMITE_MAX_DEGREE = 64
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def hermite_all(K, x):
    """Return H_0(x), ..., H_K(x) stacked along a new leading axis."""
    if K < 0 or K > HERMITE_MAX_DEGREE:
        raise ValueError(f"degree must lie in [0, {HERMITE_MAX_DEGREE}], got {K}")
    x = np.asarray(x, dtype=float)
    out = np.empty((K + 1,) + x.shape)
    out[0] = 1.0
    if K >= 1:
        out[1] = x
    for k in range(2, K + 1):
        out[k] = x * out[k - 1] - (k - 1) * out[k - 2]
    return out


def hermite_eval(k, x):
    """Probabilists' Hermite polynomial H_k at x (three-term recurrence)."""
    h = hermite_all(k, x)[k]
    return float(h) if h.ndim == 0 else h


def gaussian_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def jq_coefficient(q, u):
    """Hermite coefficient of the indicator 1{g >= u}, g standard Gaussian.

    Returns E[1{g >= u} H_q(g)], so that 1{g >= u} = sum_q J_q(u) H_q(g) / q!.
    J_0(u) = 1 - Phi(u) and J_q(u) = H_{q-1}(u) phi(u) for q >= 1.
    """
    if q < 0:
        raise ValueError("order must be nonnegative")
    u = np.asarray(u, dtype=float)
    if q == 0:
        val = ndtr(-u)
    else:
        val = hermite_all(q - 1, u)[q - 1] * gaussian_pdf(u)
    return float(val) if val.ndim == 0 else val


def sphere_surface(d):
    """Surface measure of the unit sphere S^d in R^{d+1}."""
    if d < 0:
        raise ValueError("dimension must be nonnegative")
    return 2.0 * math.exp(0.5 * (d + 1) * math.log(math.pi) - gammaln(0.5 * (d + 1)))


def beta_Nq(N, q):
    """Integral of |v_1|^q over the unit sphere S^{N-1}."""
    if N < 2 or q < 0:
        raise ValueError("need N >= 2 and q >= 0")
    return 2.0 * math.exp(0.5 * (N - 1) * math.log(math.pi)
                          + gammaln(0.5 * (q + 1)) - gammaln(0.5 * (N + q)))


def log_chi_moment(N, q):
    return 0.5 * q * math.log(2.0) + gammaln(0.5 * (N + q)) - gammaln(0.5 * N)


def chi_moment(N, q):
    """E||g||^q for g standard Gaussian in R^N."""
    if N < 1 or q < 0:
        raise ValueError("need N >= 1 and q >= 0")
    return math.exp(log_chi_moment(N, q))


def cqn_constants(q, N):
    """The pair (c_{q,N}, chat_{q,N}).

    c_{q,N} = E||g||^{2q} / E||g||^q and
    chat_{q,N} = Gamma(N/2) Gamma((N+2q)/2) / Gamma((N+q)/2)^2.
    """
    if q < 1 or N < 2:
        raise ValueError("need q >= 1 and N >= 2")
    c = math.exp(log_chi_moment(N, 2 * q) - log_chi_moment(N, q))
    chat = math.exp(gammaln(0.5 * N) + gammaln(0.5 * (N + 2 * q)) - 2.0 * gammaln(0.5 * (N + q)))
    return c, chat


def legendre_eval(ell, t):
    """Legendre polynomial P_ell(t) by Bonnet's recurrence."""
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) > 1.0 + 1e-12):
        raise ValueError("argument outside [-1, 1]")
    t = np.clip(t, -1.0, 1.0)
    p0 = np.ones_like(t)
    if ell == 0:
        out = p0
    else:
        p1 = t.copy()
        for k in range(2, ell + 1):
            p0, p1 = p1, ((2 * k - 1) * t * p1 - (k - 1) * p0) / k
        out = p1
    return float(out) if out.ndim == 0 else out


def normalized_alp(ell, cos_theta):
    """Fully normalized associated Legendre functions of degree ell.

    Returns an array of shape (ell+1, ...) with row m holding
    sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!) P_l^m(cos theta), without the
    Condon-Shortley phase.  The sectoral start and the upward recurrence
    carry the normalization step by step, so nothing overflows for large ell.
    """
    x = np.asarray(cos_theta, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((ell + 1,) + x.shape)
    pmm = np.full(x.shape, 1.0 / math.sqrt(4.0 * math.pi))
    for m in range(ell + 1):
        if m > 0:
            pmm = pmm * s * math.sqrt((2 * m + 1) / (2.0 * m))
        if m == ell:
            out[m] = pmm
            break
        prev2 = pmm
        prev1 = math.sqrt(2 * m + 3) * x * pmm
        for l in range(m + 2, ell + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            prev2, prev1 = prev1, a * (x * prev1 - b * prev2)
        out[m] = prev1 if ell > m else prev2
    return out


def real_harmonics_all(ell, theta, phi):
    """All 2*ell+1 real spherical harmonics of degree ell.

    Row j corresponds to m = j - ell.  m > 0 uses cos(m phi), m < 0 uses
    sin(|m| phi), both scaled by sqrt(2).
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    theta, phi = np.broadcast_arrays(theta, phi)
    alp = normalized_alp(ell, np.cos(theta))
    out = np.empty((2 * ell + 1,) + theta.shape)
    out[ell] = alp[0]
    r2 = math.sqrt(2.0)
    for m in range(1, ell + 1):
        out[ell + m] = r2 * alp[m] * np.cos(m * phi)
        out[ell - m] = r2 * alp[m] * np.sin(m * phi)
    return out


def real_spherical_harmonic(ell, m, theta, phi):
    """Real orthonormal spherical harmonic Y_{ell,m}(theta, phi).

    theta is the colatitude and phi the longitude.
    """
    if ell < 0:
        raise ValueError("degree must be nonnegative")
    if abs(m) > ell:
        raise IndexError(f"|m| = {abs(m)} exceeds degree {ell}")
    theta = np.asarray(theta, dtype=float)
    alp = normalized_alp(ell, np.cos(theta))[abs(m)]
    if m > 0:
        val = math.sqrt(2.0) * alp * np.cos(m * np.asarray(phi))
    elif m < 0:
        val = math.sqrt(2.0) * alp * np.sin(-m * np.asarray(phi))
    else:
        val = alp * np.ones_like(np.asarray(phi, dtype=float))
    val = np.asarray(val)
    return float(val) if val.ndim == 0 else val
