"""Random wave ensembles on the 2-sphere and the flat 2-torus.

A model holds an orthonormal basis Y_1..Y_N of one eigenspace (or of a
window of toral eigenspaces) together with a quadrature grid carrying a
neighbour graph for component counting.  Construction audits the basis
against the grid and refuses to build a model that fails.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream
from .special_functions import legendre_eval, real_harmonics_all

AUDIT_TOL = 1e-8


class AuditError(RuntimeError):
    """A build-time numerical audit failed; `invariant` names it."""

    def __init__(self, invariant, detail):
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant


@dataclass(frozen=True)
class QuadratureGrid:
    points: np.ndarray      # (M, 3) Cartesian coordinates (torus: z = 0)
    weights: np.ndarray     # (M,)
    indptr: np.ndarray      # CSR neighbour lists
    indices: np.ndarray
    shape: tuple = ()

    @property
    def size(self):
        return len(self.weights)

    def edges(self):
        rows = np.repeat(np.arange(self.size), np.diff(self.indptr))
        return np.column_stack([rows, self.indices])


def _csr(n, pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    both = np.vstack([pairs, pairs[:, ::-1]])
    both = np.unique(both, axis=0)
    both = both[both[:, 0] != both[:, 1]]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, both[:, 0] + 1, 1)
    return np.cumsum(indptr), both[:, 1].copy()


def sphere_grid(lat_order, nlon):
    """Gauss-Legendre colatitudes times uniform longitudes plus two pole nodes.

    Ring nodes come first (ring-major, colatitude increasing), then the
    north and south poles.  Poles carry zero weight and are joined to every
    node of the adjacent ring.
    """
    x, w = np.polynomial.legendre.leggauss(lat_order)
    x, w = x[::-1], w[::-1]
    theta = np.arccos(x)
    phi = 2.0 * np.pi * np.arange(nlon) / nlon
    T, P = np.meshgrid(theta, phi, indexing="ij")
    st = np.sin(T)
    ring = np.stack([st * np.cos(P), st * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    pts = np.vstack([ring, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
    wts = np.concatenate([np.outer(w, np.full(nlon, 2.0 * np.pi / nlon)).ravel(), [0.0, 0.0]])
    idx = np.arange(lat_order * nlon).reshape(lat_order, nlon)
    pairs = [np.column_stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()])]
    if lat_order > 1:
        pairs.append(np.column_stack([idx[:-1].ravel(), idx[1:].ravel()]))
    north, south = lat_order * nlon, lat_order * nlon + 1
    pairs.append(np.column_stack([np.full(nlon, north), idx[0]]))
    pairs.append(np.column_stack([np.full(nlon, south), idx[-1]]))
    indptr, indices = _csr(len(wts), np.vstack(pairs))
    return QuadratureGrid(pts, wts, indptr, indices, (lat_order, nlon))


def torus_grid(m):
    """Uniform m x m lattice on [0,1)^2 with periodic 4-neighbour adjacency."""
    g = np.arange(m) / m
    X, Yc = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Yc.ravel(), np.zeros(m * m)], axis=-1)
    wts = np.full(m * m, 1.0 / (m * m))
    idx = np.arange(m * m).reshape(m, m)
    pairs = np.vstack([
        np.column_stack([idx.ravel(), np.roll(idx, -1, axis=0).ravel()]),
        np.column_stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()]),
    ])
    indptr, indices = _csr(m * m, pairs)
    return QuadratureGrid(pts, wts, indptr, indices, (m, m))


def lattice_points(n):
    """Lambda_n: integer vectors of squared norm n, sorted."""
    r = math.isqrt(n)
    pts = [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1) if a * a + b * b == n]
    return sorted(pts)


def _canonical(pts):
    """One representative per +-pair: first nonzero coordinate positive."""
    return [p for p in pts if p[0] > 0 or (p[0] == 0 and p[1] > 0)]


@dataclass(frozen=True)
class WaveModel:
    manifold: str               # "sphere2" or "torus2"
    param: object               # ell, n, or tuple window of n values
    N: int
    volume: float
    grid: QuadratureGrid
    basis: np.ndarray           # (M, N) basis values at grid nodes
    eigenvalues: np.ndarray     # (N,) Laplace eigenvalue of each basis element
    frequencies: np.ndarray = field(default=None)   # torus: (N/2, 2) lattice representatives
    basis_grad: np.ndarray = field(default=None)    # torus: (M, N, 2)

    @property
    def c(self):
        """sqrt(N / vol), the sup of |uniform field|."""
        return math.sqrt(self.N / self.volume)

    def label(self):
        if isinstance(self.param, tuple):
            return "-".join(str(p) for p in self.param)
        return str(self.param)

    def basis_at(self, x):
        """Basis values at points x of shape (..., 3) (sphere) or (..., 2|3) (torus)."""
        x = np.asarray(x, dtype=float)
        if self.manifold == "sphere2":
            theta = np.arccos(np.clip(x[..., 2] / np.linalg.norm(x, axis=-1), -1.0, 1.0))
            phi = np.arctan2(x[..., 1], x[..., 0])
            return np.moveaxis(real_harmonics_all(self.param, theta, phi), 0, -1)
        arg = 2.0 * np.pi * (x[..., :2] @ self.frequencies.T)
        out = np.empty(x.shape[:-1] + (self.N,))
        out[..., 0::2] = math.sqrt(2.0) * np.cos(arg)
        out[..., 1::2] = math.sqrt(2.0) * np.sin(arg)
        return out

    def grad_at(self, x):
        """Torus only: basis gradients at points x, shape (..., N, 2)."""
        if self.manifold != "torus2":
            raise NotImplementedError("gradients are provided for the torus model")
        x = np.asarray(x, dtype=float)
        arg = 2.0 * np.pi * (x[..., :2] @ self.frequencies.T)
        k = 2.0 * np.pi * math.sqrt(2.0) * self.frequencies
        out = np.empty(x.shape[:-1] + (self.N, 2))
        out[..., 0::2, :] = -np.sin(arg)[..., None] * k
        out[..., 1::2, :] = np.cos(arg)[..., None] * k
        return out


def audit_model(model):
    """Run the build-time audits; raise AuditError on the first failure."""
    g = model.grid
    if abs(g.weights.sum() - model.volume) > 1e-10 * max(1.0, model.volume):
        raise AuditError("weights sum to vol(M)", f"{g.weights.sum()} vs {model.volume}")
    rows = np.repeat(np.arange(g.size), np.diff(g.indptr))
    fwd = set(zip(rows.tolist(), g.indices.tolist()))
    if any((b, a) not in fwd for a, b in fwd):
        raise AuditError("adjacency symmetric", "asymmetric neighbour lists")
    Y = model.basis
    gram = (Y * g.weights[:, None]).T @ Y
    err = float(np.max(np.abs(gram - np.eye(model.N))))
    if err > AUDIT_TOL:
        raise AuditError("orthonormality", f"max Gram deviation {err:.3e}")
    norm2 = np.sum(Y * Y, axis=1)
    err = float(np.max(np.abs(norm2 - model.N / model.volume))) / (model.N / model.volume)
    if err > AUDIT_TOL:
        raise AuditError("constant norm", f"relative deviation {err:.3e}")
    if model.basis_grad is not None:
        D = np.einsum("mni,mnj->mij", model.basis_grad, model.basis_grad)
        xi2 = D[:, 0, 0].mean()
        err = float(np.max(np.abs(D - xi2 * np.eye(2)))) / xi2
        if err > AUDIT_TOL:
            raise AuditError("homotheticity", f"relative deviation {err:.3e}")


def build_sphere_model(ell, lat_order=None, nlon=None):
    """Degree-ell real spherical harmonics on S^2 with a Gauss-Legendre grid."""
    if ell < 1:
        raise ValueError("degree must be at least 1")
    if lat_order is None:
        lat_order = 2 * ell + 2
    if nlon is None:
        nlon = 2 * lat_order
    grid = sphere_grid(lat_order, nlon)
    theta = np.arccos(np.clip(grid.points[:, 2], -1.0, 1.0))
    phi = np.arctan2(grid.points[:, 1], grid.points[:, 0])
    basis = real_harmonics_all(ell, theta, phi).T.copy()
    N = 2 * ell + 1
    model = WaveModel("sphere2", int(ell), N, 4.0 * math.pi, grid, basis,
                      np.full(N, float(ell * (ell + 1))))
    audit_model(model)
    return model


def build_torus_model(n, grid_res=None):
    """Arithmetic random waves on T^2 for one n or a window of several n."""
    ns = tuple(sorted(set(n))) if isinstance(n, (tuple, list)) else (int(n),)
    reps, eig = [], []
    for k in ns:
        pts = lattice_points(k)
        if not pts:
            raise ValueError(f"{k} is not a sum of two squares")
        for p in _canonical(pts):
            reps.append(p)
            eig += [4.0 * math.pi ** 2 * k] * 2
    freqs = np.array(reps, dtype=float)
    if grid_res is None:
        grid_res = max(16, 4 * math.isqrt(max(ns)) + 8)
    grid = torus_grid(grid_res)
    param = ns if len(ns) > 1 or isinstance(n, (tuple, list)) else ns[0]
    proto = WaveModel("torus2", param, 2 * len(reps), 1.0, grid, np.zeros((grid.size, 0)),
                      np.array(eig), freqs)
    basis = proto.basis_at(grid.points)
    grad = proto.grad_at(grid.points)
    model = WaveModel("torus2", param, 2 * len(reps), 1.0, grid, basis, np.array(eig), freqs, grad)
    audit_model(model)
    return model


def build_model(manifold, param, **grid):
    if manifold == "sphere2":
        return build_sphere_model(int(param), **grid)
    if manifold == "torus2":
        return build_torus_model(param, **grid)
    raise ValueError(f"unknown manifold {manifold!r}")


@dataclass(frozen=True)
class FieldSample:
    model: WaveModel
    gamma: np.ndarray
    kind: str  # "gaussian" or "uniform"

    def coefficients(self):
        """Coefficients a with field = <a, Y>."""
        if self.kind == "gaussian":
            return self.gamma * math.sqrt(self.model.volume / self.model.N)
        if self.kind == "uniform":
            return self.gamma / np.linalg.norm(self.gamma)
        raise ValueError(f"unknown kind {self.kind!r}")

    def grid_values(self):
        return self.model.basis @ self.coefficients()

    def negated(self):
        return FieldSample(self.model, -self.gamma, self.kind)


def field_coefficients(model, gammas, kind):
    """Batched version of FieldSample.coefficients for gammas of shape (S, N)."""
    gammas = np.asarray(gammas, dtype=float)
    if kind == "gaussian":
        return gammas * math.sqrt(model.volume / model.N)
    if kind == "uniform":
        return gammas / np.linalg.norm(gammas, axis=-1, keepdims=True)
    raise ValueError(f"unknown kind {kind!r}")


def grid_values(model, gammas, kind):
    """Field values at every grid node for a batch of coefficient vectors."""
    return field_coefficients(model, gammas, kind) @ model.basis.T


def sample_field(model, kind, rng_seed, index=0):
    if kind not in ("gaussian", "uniform"):
        raise ValueError(f"unknown kind {kind!r}")
    g = stream(rng_seed, "field", index).standard_normal(model.N)
    return FieldSample(model, g, kind)


def eval_field(sample, x):
    """f(x) or the uniform field at points x."""
    val = sample.model.basis_at(x) @ sample.coefficients()
    return float(val) if np.ndim(val) == 0 else val


def covariance_kernel(model, x, z):
    """k(x, z) = E f(x) f(z)."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if model.manifold == "sphere2":
        t = np.sum(x * z, axis=-1) / (np.linalg.norm(x, axis=-1) * np.linalg.norm(z, axis=-1))
        return legendre_eval(model.param, np.clip(t, -1.0, 1.0))
    val = (model.volume / model.N) * np.sum(model.basis_at(x) * model.basis_at(z), axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def gamma_x_project(sample, x):
    """gamma minus its component along Y(x); needs the Gaussian representation."""
    if sample.kind != "gaussian":
        raise ValueError("projection is defined for the Gaussian representation")
    y = sample.model.basis_at(x)
    s = math.sqrt(sample.model.volume / sample.model.N)
    fx = float(y @ sample.gamma) * s
    return sample.gamma - fx * y * s


def export_field_csv(sample, path):
    """Write grid node values as node_index,x,y,z,value."""
    vals = sample.grid_values()
    pts = sample.model.grid.points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_index", "x", "y", "z", "value"])
        for i, (p, v) in enumerate(zip(pts, vals)):
            w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(v))])
