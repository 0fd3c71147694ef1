"""Excursion functionals, closed-form chaos coefficients and covariance
kernels for the second and fourth chaos of the excursion area.

Sign convention: J_q(u) = E[1{g >= u} H_q(g)], so C_N(u) > 0 for u > 0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np
from scipy.special import betainc, gammaln, roots_jacobi

from .special_functions import (beta_Nq, hermite_all, hermite_eval, jq_coefficient,
                                legendre_eval, sphere_surface)
from .rng import stream
from .wave_models import grid_values

RESULTS_HEADER = ["model", "param", "N", "u", "functional", "estimate", "stderr", "samples", "seed"]


class QuadratureError(RuntimeError):
    pass


# ---------------------------------------------------------------- thresholds

@dataclass(frozen=True)
class ThresholdSpec:
    u: float
    N: int
    volume: float

    @property
    def v(self):
        return self.u * math.sqrt(self.volume)

    @property
    def sigma_N(self):
        return math.sqrt((self.N - self.v ** 2) / self.N)

    def admissible(self):
        return self.v ** 2 < self.N


def _check_level(N, u, vol):
    spec = ThresholdSpec(u, N, vol)
    if not spec.admissible():
        raise ValueError(f"level u={u} outside the admissible band |u| < sqrt(N/vol)")
    return spec


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class RegionMask:
    flags: np.ndarray     # bool per grid node
    weights: np.ndarray   # grid weights

    @property
    def volume(self):
        return float(self.weights[self.flags].sum())


def full_region(model):
    return RegionMask(np.ones(model.grid.size, dtype=bool), model.grid.weights)


def hemisphere(model, axis=(0.0, 0.0, 1.0)):
    a = np.asarray(axis, dtype=float)
    return RegionMask(model.grid.points @ a >= 0.0, model.grid.weights)


def polar_cap(model, angle):
    """Nodes within geodesic distance `angle` of the north pole."""
    z = np.clip(model.grid.points[:, 2], -1.0, 1.0)
    return RegionMask(np.arccos(z) <= angle, model.grid.weights)


# ---------------------------------------------------------------- area and b0

def excursion_area(sample, u):
    """Grid quadrature of the excursion set {field >= u}."""
    vals = sample.grid_values()
    w = sample.model.grid.weights
    return float(w[vals >= u].sum())


def excursion_areas(values, weights, us):
    """Areas for a batch of grid values (S, M) at every level in us -> (S, T)."""
    us = np.asarray(us, dtype=float)
    out = np.empty((values.shape[0], len(us)))
    for j, u in enumerate(us):
        out[:, j] = (values >= u) @ weights
    return out


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def _betti0_levels(values, indptr, indices, levels_desc, out):
    """Component counts of {values >= u} for levels sorted in decreasing order."""
    S, M = values.shape
    T = levels_desc.shape[0]
    parent = np.empty(M, dtype=np.int64)
    active = np.zeros(M, dtype=np.bool_)
    lowest = levels_desc[T - 1]
    idx = np.empty(M, dtype=np.int64)
    keys = np.empty(M)
    for s in range(S):
        vals = values[s]
        # nodes below the lowest level never matter
        cnt = 0
        for i in range(M):
            parent[i] = i
            active[i] = False
            if vals[i] >= lowest:
                idx[cnt] = i
                keys[cnt] = -vals[i]
                cnt += 1
        order = idx[:cnt][np.argsort(keys[:cnt])]
        comps = 0
        j = 0
        for k in range(cnt):
            node = order[k]
            v = vals[node]
            while j < T and levels_desc[j] > v:
                out[s, j] = comps
                j += 1
            active[node] = True
            comps += 1
            for e in range(indptr[node], indptr[node + 1]):
                nb = indices[e]
                if active[nb]:
                    a = _find(parent, node)
                    b = _find(parent, nb)
                    if a != b:
                        parent[b] = a
                        comps -= 1
        while j < T:
            out[s, j] = comps
            j += 1


def betti0_counts(values, grid, us):
    """b0 of {field >= u} on the grid graph for a batch (S, M) and levels us -> (S, T)."""
    values = np.ascontiguousarray(np.atleast_2d(values), dtype=np.float64)
    us = np.asarray(us, dtype=float)
    order = np.argsort(-us, kind="mergesort")
    tmp = np.zeros((values.shape[0], len(us)), dtype=np.int64)
    _betti0_levels(values, grid.indptr, grid.indices, np.ascontiguousarray(us[order]), tmp)
    out = np.empty_like(tmp)
    out[:, order] = tmp
    return out


class LevelFunctionals:
    """Excursion areas and b0 counts at several levels as one batched callable.

    Maps gammas (S, N) to an (S, 2T) array: T area columns then T b0 columns.
    Plain attributes only, so instances pickle for worker processes.
    """

    def __init__(self, model, kind, levels, region=None):
        self.model = model
        self.kind = kind
        self.levels = np.asarray(levels, dtype=float)
        self.weights = model.grid.weights if region is None else np.where(region.flags, region.weights, 0.0)

    def columns(self):
        return [("area", float(u)) for u in self.levels] + [("b0", float(u)) for u in self.levels]

    def __call__(self, gammas):
        vals = grid_values(self.model, gammas, self.kind)
        return np.hstack([excursion_areas(vals, self.weights, self.levels),
                          betti0_counts(vals, self.model.grid, self.levels)])


def betti0_count(sample, u):
    """Number of connected components of {field >= u} on the grid graph."""
    return int(betti0_counts(sample.grid_values()[None, :], sample.model.grid, [u])[0, 0])


# ---------------------------------------------------------------- coefficients

def _chi_mean(n):
    """E of a chi variable with n degrees of freedom."""
    return math.sqrt(2.0) * math.exp(gammaln(0.5 * (n + 1)) - gammaln(0.5 * n))


def cn_coefficient(N, u, vol):
    """C_N(u) = E[1{uniform field >= u} H_2(f)] at a fixed point.

    Equals a sigma_N^N E[chi_{N-1}] / sqrt(2 pi) with a = v / sqrt(N - v^2);
    tends to J_2(v) = v phi(v) as N grows.
    """
    t = _check_level(N, u, vol)
    v = t.v
    a = v / math.sqrt(N - v * v)
    return a * t.sigma_N ** N * _chi_mean(N - 1) / math.sqrt(2.0 * math.pi)


class FourthChaosCoeffs(NamedTuple):
    C44: float
    C42: float
    C40: float


def fourth_chaos_coeffs(N, u, vol):
    """Coefficients of the fourth chaos of the pointwise indicator.

    The pointwise fourth chaos is
        C44 H4(f)/4! + (C42/4) H2(f) S2 + (C40/4!) S4,
    where S2, S4 are the sphere averages of H2, H4 of <gamma_x, v>.  In
    terms of moments, C44 = E[1 H4(f)], C42 = (N-1) E[1 H2(f) H2(gamma_x^1)]
    and C40 = (N^2-1)/3 E[1 H4(gamma_x^1)].  All three are exact at finite N.
    """
    t = _check_level(N, u, vol)
    v = t.v
    cn = cn_coefficient(N, u, vol)
    c44 = t.sigma_N ** (N - 1) * _chi_mean(N - 1) / math.sqrt(N) * hermite_eval(3, v) \
        / math.sqrt(2.0 * math.pi)
    h2 = v * v - 1.0
    return FourthChaosCoeffs(c44, -cn * h2, cn * (h2 + 2.0))


def fourth_chaos_limits(u, vol):
    """Large-N limits of (C44, C42, C40)."""
    v = u * math.sqrt(vol)
    j2 = jq_coefficient(2, v)
    h2 = v * v - 1.0
    return FourthChaosCoeffs(jq_coefficient(4, v), -h2 * j2, j2 * (h2 + 2.0))


def uniform_exceedance_probability(N, u, vol):
    """P(uniform field at a point >= u); the squared unit coordinate is Beta(1/2, (N-1)/2)."""
    s = u / math.sqrt(N / vol)
    if s >= 1.0:
        return 0.0
    if s <= -1.0:
        return 1.0
    tail = 0.5 * (1.0 - betainc(0.5, 0.5 * (N - 1), s * s))
    return float(tail if s >= 0 else 1.0 - tail)


def fraktur_coefficient(N, q, i, u, vol, nodes=None, atol=1e-10):
    """Coefficient of the pointwise indicator on the product basis of order (q-i, i).

    The indicator 1{uniform field >= u} at a point is a function of
    (f(x), ||gamma_x||).  The returned number is

        sqrt(s_{n-1} / ((q-i)! i! beta(n, i))) E[J_{q-i}(a r) H_i(r t)],

    with n = N-1, r a chi_n variable, t the first coordinate of a uniform
    point of S^{n-1} and a = v / sqrt(N - v^2).  Odd i give zero.  The
    expectation is a tensor Gauss rule (Gauss-Legendre in r on a truncated
    range, Gauss-Jacobi in t), doubled until two successive normalized
    values agree to `atol`.
    """
    if not 0 <= i <= q:
        raise ValueError("need 0 <= i <= q")
    if N < 3:
        raise ValueError("need N >= 3")
    if i % 2:
        return 0.0
    t_spec = _check_level(N, u, vol)
    n = N - 1
    a = t_spec.v / math.sqrt(N - t_spec.v ** 2)
    q1 = q - i
    norm = math.sqrt(sphere_surface(n - 1) / (math.factorial(q1) * math.factorial(i) * beta_Nq(n, i)))

    rmax = math.sqrt(n) + 16.0
    log_norm = (0.5 * n - 1.0) * math.log(2.0) + gammaln(0.5 * n)

    def expect(m):
        x, wx = np.polynomial.legendre.leggauss(m)
        r = 0.5 * rmax * (x + 1.0)
        ws = 0.5 * rmax * wx * np.exp((n - 1) * np.log(r) - 0.5 * r * r - log_norm)
        tt, wt = roots_jacobi(m, 0.5 * (n - 3), 0.5 * (n - 3))
        wt = wt / wt.sum()
        jq = jq_coefficient(q1, a * r)
        hi = hermite_all(i, np.outer(r, tt))[i]
        return float(ws @ (jq[:, None] * hi) @ wt)

    m = nodes or max(48, 2 * q + 16)
    prev = expect(m)
    for _ in range(4):
        m *= 2
        cur = expect(m)
        if norm * abs(cur - prev) <= atol:
            return norm * cur
        prev = cur
    raise QuadratureError(f"no convergence for (N={N}, q={q}, i={i}, u={u})")


# ---------------------------------------------------------------- second chaos

def second_chaos_exact(sample, u, region):
    """Closed-form second chaos of the uniform excursion area over a region.

    (C_N/2) (||f|_A||^2 - (1/(N-1)) int_A ||gamma_x||^2 dx), with f the
    Gaussian field built from the same gamma and ||gamma_x||^2 = ||gamma||^2 - f^2.
    """
    model = sample.model
    N = model.N
    cn = cn_coefficient(N, u, model.volume)
    f = model.basis @ (sample.gamma * math.sqrt(model.volume / N))
    w = region.weights * region.flags
    r2 = float(sample.gamma @ sample.gamma)
    fa = float(w @ (f * f))
    gx = float(w @ (r2 - f * f))
    return 0.5 * cn * (fa - gx / (N - 1))


def second_chaos_batch(model, gammas, u, region):
    """Vectorized second_chaos_exact for gammas of shape (S, N)."""
    N = model.N
    cn = cn_coefficient(N, u, model.volume)
    f = (gammas * math.sqrt(model.volume / N)) @ model.basis.T
    w = region.weights * region.flags
    r2 = np.sum(gammas * gammas, axis=1)
    fa = (f * f) @ w
    gx = r2 * w.sum() - fa
    return 0.5 * cn * (fa - gx / (N - 1))


def region_kernel_moment(model, region, q=2):
    """Double integral of k(x,z)^q over A x A by grid quadrature."""
    w = region.weights * region.flags
    if q == 2:
        G = (model.basis * w[:, None]).T @ model.basis
        return (model.volume / model.N) ** 2 * float(np.sum(G * G))
    B = model.basis[region.flags]
    K = (model.volume / model.N) * B @ B.T
    ww = w[region.flags]
    return float(ww @ (K ** q) @ ww)


def variance_second_chaos(model, u, region):
    """Variance of second_chaos_exact.

    (C_N^2/4) N/(N-1)^2 [N Var(||f|_A||^2) - 2 vol(A)^2] with
    Var(||f|_A||^2) = 2 int_A int_A k^2.
    """
    N = model.N
    cn = cn_coefficient(N, u, model.volume)
    var_sa = 2.0 * region_kernel_moment(model, region, 2)
    volA = region.volume
    return 0.25 * cn * cn * N / (N - 1) ** 2 * (N * var_sa - 2.0 * volA ** 2)


# ---------------------------------------------------------------- covariances

class Cov2nd(NamedTuple):
    hh: float
    ss: float
    cross: float


def cov2nd_formulas(N, k):
    """Covariances among H2(f(x)), H2(f(z)) and S2(x), S2(z) at covariance k.

    S2(x) = ||gamma_x||^2/(N-1) - 1 is the sphere average of H2(<gamma_x, v>).
    """
    if abs(k) > 1.0 + 1e-12:
        raise ValueError("|k| must not exceed 1")
    k2 = k * k
    return Cov2nd(2.0 * k2, (2.0 * k2 + 2.0 * (N - 2)) / (N - 1) ** 2, (2.0 - 2.0 * k2) / (N - 1))


class Cov4th(NamedTuple):
    h4_h4: float
    h2s2_h2s2: float
    s4_s4: float
    h4_h2s2: float
    h4_s4: float
    h2s2_s4: float


def cov4th_formulas(N, k):
    """Covariances among the three fourth-chaos building blocks at two points.

    Blocks: H4(f), H2(f) S2 and S4, with S4 the sphere average of
    H4(<gamma_x, v>).  The H2 S2 self-covariance is
    4 (6 k^4 + (N-8) k^2 + 1) / (N-1)^2.
    """
    if abs(k) > 1.0 + 1e-12:
        raise ValueError("|k| must not exceed 1")
    k2, k4 = k * k, k ** 4
    n1 = N - 1
    m = N * N - 1
    return Cov4th(
        24.0 * k4,
        4.0 * (6.0 * k4 + (N - 8) * k2 + 1.0) / n1 ** 2,
        24.0 * (9.0 * k4 + 6.0 * (N - 2) * k2 + 3.0 * N * (N - 2)) / m ** 2,
        24.0 / n1 * (k2 - k4),
        72.0 / m * (1.0 - 2.0 * k2 + k4),
        24.0 * ((N - 2) - (N - 5) * k2 - 3.0 * k4) / (m * n1),
    )


def scalar_product_fourth_moment(N):
    """E<xi, eta>^4 for independent standard Gaussian vectors in R^N."""
    return 3.0 * N * (N + 2)


def s2_s4(r2, N):
    """Sphere averages S2, S4 of H2, H4 of <gamma_x, v> given ||gamma_x||^2."""
    n = N - 1
    s2 = r2 / n - 1.0
    s4 = 3.0 * r2 * r2 / (n * (n + 2)) - 6.0 * r2 / n + 3.0
    return s2, s4


def _unit_direction(model, x):
    y = model.basis_at(np.asarray(x, dtype=float)) * math.sqrt(model.volume / model.N)
    return y / np.linalg.norm(y)


def _mc_mean(vals):
    vals = np.asarray(vals, dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def pointwise_coefficients_mc(model, u, x, samples, rng_seed, block=200000):
    """Monte Carlo of E[1{f~(x) >= u} H_2(f(x))] and E[1{f~(x) >= u} H_4(f(x))].

    Returns {"C_N": (est, se), "C44": (est, se)}.
    """
    _check_level(model.N, u, model.volume)
    y = _unit_direction(model, x)
    scale = math.sqrt(model.N / model.volume)
    acc2, acc4 = [], []
    for b, start in enumerate(range(0, samples, block)):
        m = min(block, samples - start)
        g = stream(rng_seed, "coefficient-oracle", b).standard_normal((m, model.N))
        f = g @ y
        ind = (f * scale / np.linalg.norm(g, axis=1) >= u).astype(float)
        h = hermite_all(4, f)
        acc2.append(ind * h[2])
        acc4.append(ind * h[4])
    return {"C_N": _mc_mean(np.concatenate(acc2)), "C44": _mc_mean(np.concatenate(acc4))}


def _blocks_at(f, r2, N):
    h = hermite_all(4, f)
    s2, s4 = s2_s4(r2, N)
    return h[2], s2, h[4], h[2] * s2, s4


def covariance_mc(model, x, z, samples, rng_seed, block=200000):
    """Monte Carlo of the second- and fourth-chaos cross covariances between x and z.

    Returns (k, {name: (est, se)}) with names the fields of Cov2nd and Cov4th.
    All blocks have mean zero, so each covariance is the mean of a product;
    the two orderings of a mixed pair are averaged.
    """
    N = model.N
    yx, yz = _unit_direction(model, x), _unit_direction(model, z)
    k = float(yx @ yz)
    names = list(Cov2nd._fields) + list(Cov4th._fields)
    acc = {n: [] for n in names}
    for b, start in enumerate(range(0, samples, block)):
        m = min(block, samples - start)
        g = stream(rng_seed, "covariance-check", b).standard_normal((m, N))
        nrm = np.sum(g * g, axis=1)
        fx, fz = g @ yx, g @ yz
        H2x, S2x, H4x, HSx, S4x = _blocks_at(fx, nrm - fx * fx, N)
        H2z, S2z, H4z, HSz, S4z = _blocks_at(fz, nrm - fz * fz, N)

        def sym(ax, bx, az, bz):
            return 0.5 * (ax * bz + bx * az)

        acc["hh"].append(H2x * H2z)
        acc["ss"].append(S2x * S2z)
        acc["cross"].append(sym(H2x, S2x, H2z, S2z))
        acc["h4_h4"].append(H4x * H4z)
        acc["h2s2_h2s2"].append(HSx * HSz)
        acc["s4_s4"].append(S4x * S4z)
        acc["h4_h2s2"].append(sym(H4x, HSx, H4z, HSz))
        acc["h4_s4"].append(sym(H4x, S4x, H4z, S4z))
        acc["h2s2_s4"].append(sym(HSx, S4x, HSz, S4z))
    return k, {n: _mc_mean(np.concatenate(v)) for n, v in acc.items()}


def scalar_product_moment_mc(N, samples, rng_seed):
    """Monte Carlo of E<xi, eta>^4; returns (est, se)."""
    r = stream(rng_seed, "scalar-product", N)
    xi = r.standard_normal((samples, N))
    eta = r.standard_normal((samples, N))
    return _mc_mean(np.einsum("ij,ij->i", xi, eta) ** 4)


# ---------------------------------------------------------------- asymptotics

def moment_integral(ell, q):
    """Double integral over S^2 x S^2 of P_ell(<x,z>)^q, i.e. 8 pi^2 int P_ell^q.

    Gauss-Legendre with q*ell/2 + 1 nodes integrates the polynomial exactly.
    """
    ell = getattr(ell, "param", ell)
    nodes = (q * ell) // 2 + 1
    t, w = np.polynomial.legendre.leggauss(nodes)
    return 8.0 * math.pi ** 2 * float(w @ legendre_eval(ell, t) ** q)


class FourthChaosVariance(NamedTuple):
    leading: float
    remainder_bound: float


def _fourth_chaos_polynomial(N, u, vol):
    """(D4, D2, D0) with Var = D4 I4 + D2 I2 + D0 vol(A)^2."""
    c44, c42, c40 = fourth_chaos_coeffs(N, u, vol)
    a, b, c = c44 / 24.0, c42 / 4.0, c40 / 24.0
    n1, m = N - 1, N * N - 1
    # each covariance as (k^4, k^2, 1) coefficients
    h4h4 = np.array([24.0, 0.0, 0.0])
    sxsx = np.array([24.0, 4.0 * (N - 8), 4.0]) / n1 ** 2
    s4s4 = 24.0 * np.array([9.0, 6.0 * (N - 2), 3.0 * N * (N - 2)]) / m ** 2
    h4sx = 24.0 / n1 * np.array([-1.0, 1.0, 0.0])
    h4s4 = 72.0 / m * np.array([1.0, -2.0, 1.0])
    sxs4 = 24.0 * np.array([-3.0, -(N - 5), N - 2]) / (m * n1)
    D = (a * a * h4h4 + b * b * sxsx + c * c * s4s4
         + 2 * a * b * h4sx + 2 * a * c * h4s4 + 2 * b * c * sxs4)
    return D


def _sphere_params(model):
    # a bare degree stands for the sphere model of that degree; no grid needed
    if isinstance(model, (int, np.integer)):
        return int(model), 2 * int(model) + 1, 4.0 * math.pi
    if model.manifold != "sphere2":
        raise ValueError("sphere models only")
    return model.param, model.N, model.volume


def fourth_chaos_variance_exact(model, u, region=None):
    """Variance of the fourth chaos of the uniform excursion area over a region.

    model may be a sphere WaveModel or just the degree ell (whole sphere only).
    """
    ell, N, vol = _sphere_params(model)
    if region is None:
        I4 = moment_integral(ell, 4)
        I2 = moment_integral(ell, 2)
        volA = vol
    else:
        I4 = region_kernel_moment(model, region, 4)
        I2 = region_kernel_moment(model, region, 2)
        volA = region.volume
    D4, D2, D0 = _fourth_chaos_polynomial(N, u, vol)
    return D4 * I4 + D2 * I2 + D0 * volA ** 2


def fourth_chaos_variance(model, u):
    """Leading term (C44^2/4!) I4 and the size of everything else.

    The remainder is computed exactly from the closed-form covariances, so
    the bound is attained.
    """
    ell, N, vol = _sphere_params(model)
    c44 = fourth_chaos_coeffs(N, u, vol).C44
    leading = c44 * c44 / 24.0 * moment_integral(ell, 4)
    total = fourth_chaos_variance_exact(ell, u)
    return FourthChaosVariance(leading, abs(total - leading))


def fourth_chaos_batch(model, gammas, u, region=None):
    """The closed-form fourth chaos of the uniform excursion area for gammas (S, N)."""
    N = model.N
    c44, c42, c40 = fourth_chaos_coeffs(N, u, model.volume)
    f = (gammas * math.sqrt(model.volume / N)) @ model.basis.T
    r2 = np.sum(gammas * gammas, axis=1)[:, None] - f * f
    s2, s4 = s2_s4(r2, N)
    w = model.grid.weights if region is None else region.weights * region.flags
    h = hermite_all(4, f)
    pointwise = c44 * h[4] / 24.0 + c42 / 4.0 * h[2] * s2 + c40 / 24.0 * s4
    return pointwise @ w


# ---------------------------------------------------------------- output

def write_results_csv(rows, path, append=False):
    """Rows are dicts keyed by RESULTS_HEADER."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in RESULTS_HEADER})


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x
