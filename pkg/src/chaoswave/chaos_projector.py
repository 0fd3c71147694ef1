"""Empirical Wiener-chaos analysis of functionals of a standard Gaussian vector.

Functionals are callables mapping an array of shape (S, N) to S values, or
to an (S, K) array when several functionals share one ensemble.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chaos_algebra import (SymmetricTensor, TensorEstimate, chaos_tensor_bruteforce,
                            sorted_classes, _orbit_sizes, tensor_inner_isometry)
from .rng import stream
from .special_functions import beta_Nq, hermite_all, sphere_surface

DEFAULT_T_GRID = (0.25, 0.5)
DEFAULT_Q = 4
RCOND = 1e-10
JACKKNIFE_GROUPS = 50
BLOCK_SIZE = 4000
PILOT_SIZE = 2000
SPECTRUM_HEADER = ["functional", "model", "param", "u", "q", "var_q", "stderr_q", "samples",
                   "seed", "condition_number"]


def mehler_coupled_pair(gamma, t, rng):
    """t gamma + sqrt(1 - t^2) gamma' with gamma' an independent copy."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    gamma = np.asarray(gamma, dtype=float)
    return t * gamma + math.sqrt(1.0 - t * t) * rng.standard_normal(gamma.shape)


@dataclass(frozen=True)
class ChaosSpectrum:
    orders: np.ndarray
    variances: np.ndarray
    stderrs: np.ndarray
    samples: int
    t_grid: tuple
    condition_number: float
    total_variance: float
    total_variance_stderr: float
    rho: np.ndarray = field(default=None)   # Cov(X(gamma), X(gamma_s)) at s in lags
    lags: tuple = ()

    def var(self, q):
        return float(self.variances[q])

    def se(self, q):
        return float(self.stderrs[q])

    def z(self, q):
        v, s = self.var(q), self.se(q)
        if abs(v) <= 1e-12 * (1.0 + abs(self.total_variance)):
            return 0.0   # rounding level, e.g. a functional that is constant
        return v / s if s > 0 else math.copysign(math.inf, v)


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _lags(t_grid):
    return tuple([-t for t in reversed(t_grid)] + [0.0] + list(t_grid))


def _spectrum_block(args):
    # One gamma' per sample serves every lag, so the rho(s) estimates share
    # their noise and the differences the fit relies on are much sharper.
    X, N, t_grid, seed, label, b, m = args
    g = stream(seed, label, b).standard_normal((m, N))
    gp = stream(seed, label + "/prime", b).standard_normal((m, N))
    x0 = _as_2d(X(g))
    lags = _lags(t_grid)
    sums = np.zeros((len(lags) + 1, 2, x0.shape[1]))
    sums[0, 0] = x0.sum(0)
    sums[0, 1] = (x0 * x0).sum(0)
    for j, s in enumerate(lags):
        # s < 0 is the coupling of -gamma, still a standard Gaussian pair
        xs = _as_2d(X(s * g + math.sqrt(1.0 - s * s) * gp))
        sums[j + 1, 0] = xs.sum(0)
        sums[j + 1, 1] = (x0 * xs).sum(0)
    return m, sums


def _run_blocks(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _blocks(samples, block_size):
    # small runs still get enough blocks for the jackknife
    block_size = max(1, min(block_size, -(-samples // JACKKNIFE_GROUPS)))
    nb = -(-samples // block_size)
    return [(b, min(block_size, samples - b * block_size)) for b in range(nb)]


def _design(t_grid, Q):
    """Vandermonde blocks for the even part (with intercept) and the odd part."""
    t = np.asarray(t_grid, dtype=float)
    te = np.concatenate([[0.0], t])
    even = [q for q in range(2, Q + 1, 2)]
    odd = [q for q in range(1, Q + 1, 2)]
    Ae = np.stack([te ** 0] + [te ** q for q in even], axis=1)
    Ao = np.stack([t ** q for q in odd], axis=1) if odd else np.zeros((len(t), 0))
    return Ae, even, Ao, odd


def _solve(A, y):
    # truncated-SVD least squares: singular values below RCOND * max are dropped.
    # Unlike a Tikhonov term this leaves well-conditioned fits unbiased.
    if A.shape[1] == 0:
        return np.zeros((0,) + y.shape[1:])
    return np.linalg.lstsq(A, y, rcond=RCOND)[0]


def _fit(rho, t_grid, Q):
    """rho over the symmetric lags -> (Var[1..Q], offset)."""
    T = len(t_grid)
    neg, zero, pos = rho[:T][::-1], rho[T], rho[T + 1:]
    Ae, even, Ao, odd = _design(t_grid, Q)
    ce = _solve(Ae, np.concatenate([zero[None], 0.5 * (pos + neg)]))
    co = _solve(Ao, 0.5 * (pos - neg))
    out = np.zeros((Q,) + rho.shape[1:])
    for i, q in enumerate(even):
        out[q - 1] = ce[i + 1]
    for i, q in enumerate(odd):
        out[q - 1] = co[i]
    return out, ce[0]


def vandermonde_condition(t_grid, Q):
    Ae, _, Ao, _ = _design(t_grid, Q)
    conds = [np.linalg.cond(Ae)]
    if Ao.shape[1]:
        conds.append(np.linalg.cond(Ao))
    return float(max(conds))


def chaos_spectra(X: Callable, N, Q=DEFAULT_Q, t_grid=DEFAULT_T_GRID, samples=100000, rng_seed=0,
                  label="spectrum", block_size=BLOCK_SIZE, workers=1):
    """Per-order chaos variances of one or several functionals sharing an ensemble.

    rho(s) = Cov(X(gamma), X(s gamma + sqrt(1 - s^2) gamma')) = sum_q s^q Var(X[q])
    is estimated at s in {0, +-t : t in t_grid}.  The even part
    (rho(t) + rho(-t))/2 is fitted by an offset plus the even orders, the odd
    part by the odd orders, each by truncated-SVD least squares.  The offset
    soaks up the sampling error that all lags share through gamma'.
    Standard errors come from a jackknife over groups of blocks.  Returns a
    list of ChaosSpectrum, one per output column of X.
    """
    t_grid = tuple(float(t) for t in t_grid)
    if Q < 1:
        raise ValueError("need Q >= 1")
    if any(not 0.0 < t < 1.0 for t in t_grid) or len(set(t_grid)) != len(t_grid):
        raise ValueError("t_grid must hold distinct values in (0, 1)")
    if (Q + 1) // 2 > len(t_grid):
        raise ValueError("t_grid too short for Q: need ceil(Q/2) <= len(t_grid)")
    cond = vandermonde_condition(t_grid, Q)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"ill-conditioned fit (condition number {cond:.3e})")
    jobs = [(X, N, t_grid, rng_seed, label, b, m) for b, m in _blocks(samples, block_size)]
    results = _run_blocks(_spectrum_block, jobs, workers)
    counts = np.array([m for m, _ in results], dtype=float)
    sums = np.stack([s for _, s in results])  # (B, L+1, 2, K)
    G = min(JACKKNIFE_GROUPS, len(results))
    group = np.arange(len(results)) % G
    gsums = np.stack([sums[group == k].sum(0) for k in range(G)])
    gcounts = np.array([counts[group == k].sum() for k in range(G)])

    def estimate(S, n):
        mu0 = S[0, 0] / n
        var0 = S[0, 1] / n - mu0 ** 2
        rho = S[1:, 1] / n - mu0 * S[1:, 0] / n   # (L, K)
        return var0, rho

    total_S, total_n = gsums.sum(0), gcounts.sum()
    var0, rho = estimate(total_S, total_n)
    coef, _ = _fit(rho, t_grid, Q)   # (Q, K)
    jk_coef, jk_var = [], []
    for g in range(G):
        v, r = estimate(total_S - gsums[g], total_n - gcounts[g])
        jk_var.append(v)
        jk_coef.append(_fit(r, t_grid, Q)[0])
    jk_coef, jk_var = np.stack(jk_coef), np.stack(jk_var)
    fac = (G - 1) / G if G > 1 else 0.0
    se = np.sqrt(fac * np.sum((jk_coef - jk_coef.mean(0)) ** 2, axis=0))
    se_var = np.sqrt(fac * np.sum((jk_var - jk_var.mean(0)) ** 2, axis=0))
    out = []
    for k in range(var0.shape[0]):
        out.append(ChaosSpectrum(np.arange(Q + 1), np.concatenate([[0.0], coef[:, k]]),
                                 np.concatenate([[0.0], se[:, k]]), int(total_n), t_grid, cond,
                                 float(var0[k]), float(se_var[k]), rho[:, k].copy(), _lags(t_grid)))
    return out


def chaos_spectrum(X: Callable, N, Q=DEFAULT_Q, t_grid=DEFAULT_T_GRID, samples=100000, rng_seed=0, **kw):
    """Chaos spectrum of a single scalar functional."""
    return chaos_spectra(X, N, Q, t_grid, samples, rng_seed, **kw)[0]


# ---------------------------------------------------------------- direct routes

@dataclass(frozen=True)
class DirectProjection:
    estimate: TensorEstimate
    var_q: float

    @property
    def tensor(self):
        return self.estimate.tensor

    @property
    def stderr(self):
        return self.estimate.stderr


def direct_projection_small(X: Callable, q, N, samples, rng_seed):
    """Full q-th chaos tensor of X with per-entry errors and Var(X[q]) = q! <K, K>."""
    est = chaos_tensor_bruteforce(X, q, N, samples, rng_seed)
    return DirectProjection(est, tensor_inner_isometry(est.tensor, est.tensor))


@dataclass(frozen=True)
class ChaosVariance:
    estimate: float
    stderr: float
    samples: int


def _ustat_block(args):
    X, N, q, seed, label, b, m, shift = args
    g = stream(seed, label, b).standard_normal((m, N))
    x = _as_2d(X(g)) - shift
    h = hermite_all(q, g)
    classes = sorted_classes(q, N)
    out = np.zeros((len(classes), x.shape[1]))
    for j, c in enumerate(classes):
        w = np.ones(m)
        for l, a in zip(*np.unique(c, return_counts=True)):
            w = w * h[a, :, l]
        out[j] = w @ x
    return m, out


def chaos_variance_direct(X: Callable, q, N, samples, rng_seed, label="direct",
                          block_size=BLOCK_SIZE, workers=1):
    """Unbiased estimate of Var(X[q]) from Wick-class moments.

    With Z_c = X :gamma^c: and K(c) = E Z_c / q!, Var(X[q]) = q! sum_c orbit(c) K(c)^2.
    Each squared mean is estimated without bias from independent blocks:
    (sum_b sum_b' Zbar_b Zbar_b', b != b').  Errors by jackknife over blocks.
    Returns one ChaosVariance per output column of X.
    """
    # E[c :gamma^c:] = 0 for any constant c, so subtracting a pilot mean keeps
    # the estimate unbiased and removes the large mean-squared term from its noise
    pilot = stream(rng_seed, label + "/pilot").standard_normal((PILOT_SIZE, N))
    shift = _as_2d(X(pilot)).mean(0)
    jobs = [(X, N, q, rng_seed, label, b, m, shift) for b, m in _blocks(samples, block_size)]
    res = _run_blocks(_ustat_block, jobs, workers)
    n = np.array([m for m, _ in res], dtype=float)
    S = np.stack([s for _, s in res])  # (B, C, K)
    B = len(res)
    if B < 2:
        raise ValueError("need at least two blocks")
    orbit = _orbit_sizes(q, N)[:, None]
    fq = math.factorial(q)

    def est(S, n):
        tot = S.sum(0)
        ntot = n.sum()
        # cross-block products only: (sum S)^2 - sum S_b^2 over sum_{b != b'} n_b n_b'
        cross = tot ** 2 - np.sum(S ** 2, axis=0)
        denom = ntot ** 2 - np.sum(n ** 2)
        ksq = cross / denom / fq ** 2
        return fq * np.sum(orbit * ksq, axis=0)

    full = est(S, n)
    jk = np.stack([est(np.delete(S, b, 0), np.delete(n, b)) for b in range(B)])
    se = np.sqrt((B - 1) / B * np.sum((jk - jk.mean(0)) ** 2, axis=0))
    return [ChaosVariance(float(full[k]), float(se[k]), int(n.sum())) for k in range(full.shape[0])]


# ---------------------------------------------------------------- spherical chaos basis

def sphere_hermite_integral(q, r, n):
    """Integral over S^{n-1} of H_q(r v_1) dv, a polynomial in r."""
    coeffs = np.polynomial.hermite_e.herme2poly(np.eye(q + 1)[q])
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    for j in range(0, q + 1, 2):
        out = out + coeffs[j] * beta_Nq(n, j) * r ** j
    return out


def spherical_chaos_element(gamma, q1, q2):
    """Normalized H_{q1}(gamma^1) times the sphere integral of H_{q2} over the rest."""
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[-1] - 1
    r = np.linalg.norm(gamma[..., 1:], axis=-1)
    norm = math.sqrt(sphere_surface(n - 1) * math.factorial(q1) * math.factorial(q2)
                     * beta_Nq(n, q2))
    return hermite_all(q1, gamma[..., 0])[q1] * sphere_hermite_integral(q2, r, n) / norm


@dataclass(frozen=True)
class AFamilyCoefficient:
    coefficient: float
    stderr: float
    q1: int
    q2: int
    N: int

    def projection(self, gamma):
        """c H_{q1}(gamma^1) times the sphere integral of H_{q2}(<gamma', v>)."""
        gamma = np.asarray(gamma, dtype=float)
        r = np.linalg.norm(gamma[..., 1:], axis=-1)
        return self.coefficient * hermite_all(self.q1, gamma[..., 0])[self.q1] \
            * sphere_hermite_integral(self.q2, r, self.N - 1)


def a_family_projection(X: Callable, q1, q2, N, samples, rng_seed, block=50000):
    """Coefficient E[X H_{q1}(g1) H_{q2}(g2)] / (q1! q2! beta(N-1, q2)).

    X must depend on gamma only through gamma^1 and the norm of the
    remaining N-1 coordinates; this is checked on a random rotation.
    """
    if q2 % 2:
        return AFamilyCoefficient(0.0, 0.0, q1, q2, N)
    rng = stream(rng_seed, "a-family-audit", 0)
    g = rng.standard_normal((512, N))
    Qm, _ = np.linalg.qr(rng.standard_normal((N - 1, N - 1)))
    gr = g.copy()
    gr[:, 1:] = g[:, 1:] @ Qm.T
    x1, x2 = np.asarray(X(g), dtype=float), np.asarray(X(gr), dtype=float)
    scale = max(1.0, float(np.max(np.abs(x1))))
    if np.mean(np.abs(x1 - x2) > 1e-9 * scale) > 0.01:
        raise ValueError("functional is not invariant under rotations of the last N-1 coordinates")
    s1 = s2 = 0.0
    done = b = 0
    while done < samples:
        m = min(block, samples - done)
        g = stream(rng_seed, "a-family", b).standard_normal((m, N))
        z = np.asarray(X(g), dtype=float) * hermite_all(q1, g[:, 0])[q1] * hermite_all(q2, g[:, 1])[q2]
        s1 += z.sum()
        s2 += (z * z).sum()
        done += m
        b += 1
    mean = s1 / samples
    se = math.sqrt(max(s2 / samples - mean ** 2, 0.0) / max(samples - 1, 1))
    norm = math.factorial(q1) * math.factorial(q2) * beta_Nq(N - 1, q2)
    return AFamilyCoefficient(mean / norm, se / norm, q1, q2, N)


# ---------------------------------------------------------------- torus structure check

@dataclass(frozen=True)
class Louis2Result:
    fit_residual: float
    monochromatic_var2: float
    monochromatic_var2_stderr: float
    slope: float
    K2: TensorEstimate
    predictor: SymmetricTensor


def integrated_functional(model, F: Callable):
    """gamma -> grid integral of F(uniform field, |grad uniform field|)."""
    B = model.basis
    Dx = model.basis_grad[..., 0] if model.basis_grad is not None else None
    Dy = model.basis_grad[..., 1] if model.basis_grad is not None else None
    w = model.grid.weights

    def X(g):
        a = g / np.linalg.norm(g, axis=-1, keepdims=True)
        f = a @ B.T
        if Dx is None:
            grad = np.zeros_like(f)
        else:
            grad = np.hypot(a @ Dx.T, a @ Dy.T)
        return np.asarray(F(f, grad)) @ w

    return X


def thm_louis2_check(model, F: Callable, samples, rng_seed, mono_samples=None):
    """Second-chaos structure of the integral of F(f~, |grad f~|) on a torus window.

    Estimates the chaos-2 tensor K2 by Monte Carlo and fits it by the single
    predictor diag(lambda_bar^2 - lambda_i^2).  The relative residual
    ||K2 - s D|| / ||K2|| is returned together with Var[2] of the same
    functional on the monochromatic model of the first frequency.
    """
    from .wave_models import build_torus_model

    if model.manifold != "torus2" or len(set(model.eigenvalues)) != 2:
        raise ValueError("need a torus window with exactly two distinct eigenvalues")
    N = model.N
    est = chaos_tensor_bruteforce(integrated_functional(model, F), 2, N, samples, rng_seed)
    lam = model.eigenvalues
    D = SymmetricTensor.from_dense(np.diag(lam.mean() - lam), symmetrize=False)
    K = est.tensor
    slope = K.inner(D) / D.inner(D)
    resid = (K - D * slope).norm() / K.norm()
    n1 = model.param[0]
    mono = build_torus_model(n1, grid_res=model.grid.shape[0])
    cv = chaos_variance_direct(integrated_functional(mono, F), 2, mono.N,
                               mono_samples or samples, rng_seed, label="louis2-mono")[0]
    return Louis2Result(float(resid), cv.estimate, cv.stderr, float(slope), est, D)


def write_spectrum_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SPECTRUM_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in SPECTRUM_HEADER})
