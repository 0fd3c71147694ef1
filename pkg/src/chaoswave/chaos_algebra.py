"""Wick products, symmetric tensors and chaos tensors of functionals of a
standard Gaussian vector.

Index tuples are zero-based: a tuple in [N]^q has entries in 0..N-1.
A symmetric tensor stores one value per sorted index tuple; the full
tensor over [N]^q is recovered by symmetry.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import null_space

from .special_functions import cqn_constants, hermite_all
from .rng import stream

MAX_PARTITION_ORDER = 12


@dataclass(frozen=True)
class MultiIndex:
    counts: tuple

    @property
    def total(self):
        return sum(self.counts)

    @property
    def factorial(self):
        return math.prod(math.factorial(a) for a in self.counts)

    def orbit_size(self):
        """Number of index tuples sharing this multiplicity vector."""
        return math.factorial(self.total) // self.factorial


def multiplicity_vector(indices, N):
    counts = [0] * N
    for i in indices:
        if not 0 <= i < N:
            raise IndexError(f"index {i} outside 0..{N - 1}")
        counts[i] += 1
    return MultiIndex(tuple(counts))


@lru_cache(maxsize=None)
def sorted_classes(q, N):
    """Sorted index tuples of [N]^q, one per multiplicity class."""
    return tuple(itertools.combinations_with_replacement(range(N), q))


@lru_cache(maxsize=None)
def _orbit_sizes(q, N):
    return np.array([multiplicity_vector(c, N).orbit_size() for c in sorted_classes(q, N)],
                    dtype=float)


@lru_cache(maxsize=None)
def _class_position(q, N):
    return {c: j for j, c in enumerate(sorted_classes(q, N))}


class SymmetricTensor:
    """Symmetric q-tensor over [N]^q keyed by sorted index tuples."""

    def __init__(self, q, N, values=None):
        self.q = int(q)
        self.N = int(N)
        n = len(sorted_classes(self.q, self.N))
        if values is None:
            values = np.zeros(n)
        values = np.array(values, dtype=float)
        if values.shape != (n,):
            raise ValueError(f"expected {n} class values, got shape {values.shape}")
        values.setflags(write=False)
        self._values = values

    @property
    def values(self):
        return self._values

    @property
    def classes(self):
        return sorted_classes(self.q, self.N)

    @property
    def orbit_sizes(self):
        return _orbit_sizes(self.q, self.N)

    @classmethod
    def from_entries(cls, q, N, entries):
        pos = _class_position(q, N)
        vals = np.zeros(len(pos))
        for idx, v in entries.items():
            vals[pos[tuple(sorted(idx))]] = v
        return cls(q, N, vals)

    @classmethod
    def from_dense(cls, arr, symmetrize=True):
        arr = np.asarray(arr, dtype=float)
        q, N = arr.ndim, arr.shape[0]
        if symmetrize and q > 1:
            perms = list(itertools.permutations(range(q)))
            arr = sum(np.transpose(arr, p) for p in perms) / len(perms)
        return cls(q, N, [arr[c] for c in sorted_classes(q, N)])

    def to_dense(self):
        out = np.zeros((self.N,) * self.q)
        for c, v in zip(self.classes, self._values):
            for p in set(itertools.permutations(c)):
                out[p] = v
        return out

    def __getitem__(self, idx):
        return self._values[_class_position(self.q, self.N)[tuple(sorted(idx))]]

    def entries(self):
        return dict(zip(self.classes, self._values))

    def _check(self, other):
        if (self.q, self.N) != (other.q, other.N):
            raise ValueError(f"shape mismatch: ({self.q},{self.N}) vs ({other.q},{other.N})")

    def __add__(self, other):
        self._check(other)
        return SymmetricTensor(self.q, self.N, self._values + other._values)

    def __sub__(self, other):
        self._check(other)
        return SymmetricTensor(self.q, self.N, self._values - other._values)

    def __mul__(self, s):
        return SymmetricTensor(self.q, self.N, s * self._values)

    __rmul__ = __mul__

    def inner(self, other):
        """Euclidean inner product over the full index set [N]^q."""
        self._check(other)
        return float(np.sum(self.orbit_sizes * self._values * other._values))

    def norm(self):
        return math.sqrt(self.inner(self))

    def contract(self):
        """Contraction over one pair of slots; a symmetric (q-2)-tensor."""
        if self.q < 2:
            raise ValueError("need q >= 2 to contract")
        dense = self.to_dense()
        c = np.trace(dense, axis1=0, axis2=1)
        if self.q == 2:
            return SymmetricTensor(0, self.N, [float(c)])
        return SymmetricTensor.from_dense(c, symmetrize=False)

    def is_traceless(self, tol=1e-10):
        if self.q < 2:
            return True
        scale = max(1.0, float(np.max(np.abs(self._values))))
        return float(np.max(np.abs(self.contract().values))) <= tol * scale

    def polynomial(self, x):
        """Sum of K(i) x_{i1}...x_{iq} over [N]^q, x of shape (..., N)."""
        x = np.asarray(x, dtype=float)
        mono = np.ones(x.shape[:-1] + (len(self.classes),))
        for j, c in enumerate(self.classes):
            for i in c:
                mono[..., j] *= x[..., i]
        return mono @ (self.orbit_sizes * self._values)

    def dumps(self):
        lines = [f"{self.q} {self.N}"]
        for c, v in zip(self.classes, self._values):
            lines.append(f"{','.join(str(i) for i in c)} {float(v)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        rows = [r for r in text.strip().splitlines() if r.strip()]
        q, N = (int(t) for t in rows[0].split())
        entries = {}
        for r in rows[1:]:
            key, val = r.split()
            idx = tuple(int(t) for t in key.split(",")) if key else ()
            entries[idx] = float(val)
        return cls.from_entries(q, N, entries)

    def __repr__(self):
        return f"SymmetricTensor(q={self.q}, N={self.N}, norm={self.norm():.6g})"


def identity_tensor(N):
    return SymmetricTensor.from_dense(np.eye(N), symmetrize=False)


def wick_eval(indices, gamma):
    """Wick product of gamma^{i1},...,gamma^{iq}; gamma of shape (..., N)."""
    gamma = np.asarray(gamma, dtype=float)
    alpha = multiplicity_vector(indices, gamma.shape[-1]).counts
    out = np.ones(gamma.shape[:-1])
    for l, a in enumerate(alpha):
        if a:
            out = out * hermite_all(a, gamma[..., l])[a]
    return float(out) if out.ndim == 0 else out


def wick_covariance(idx1, idx2, N=None):
    """E[:gamma^{idx1}: :gamma^{idx2}:]."""
    if N is None:
        N = max(list(idx1) + list(idx2) + [0]) + 1
    a = multiplicity_vector(idx1, N)
    b = multiplicity_vector(idx2, N)
    return float(a.factorial) if a == b else 0.0


def tensor_inner_isometry(K, H):
    """q! <K, H>, which is E[XY] for the represented chaos elements."""
    K._check(H)
    return math.factorial(K.q) * K.inner(H)


def chaos_element(K, gamma):
    """Evaluate X = sum K(i) :gamma^i: at gamma of shape (..., N)."""
    gamma = np.asarray(gamma, dtype=float)
    out = np.zeros(gamma.shape[:-1])
    for c, w, v in zip(K.classes, K.orbit_sizes, K.values):
        if v != 0.0:
            out = out + w * v * wick_eval(c, gamma)
    return out


@lru_cache(maxsize=None)
def _contraction_basis(q, N):
    """Orthonormal basis (in scaled class coordinates) of the traceless subspace."""
    upper = _class_position(q, N)
    lower = sorted_classes(q - 2, N)
    sq = np.sqrt(_orbit_sizes(q, N))
    # (C K)(d) = sum_j K(j, j, d) for each lower class d
    A = np.zeros((len(lower), len(upper)))
    for r, d in enumerate(lower):
        for j in range(N):
            A[r, upper[tuple(sorted((j, j) + d))]] += 1.0
    return null_space(A / sq[None, :])


def traceless_project(K):
    """Orthogonal split K = TL + Tr with TL traceless and Tr orthogonal to it."""
    q, N = K.q, K.N
    if q <= 1:
        return K, SymmetricTensor(q, N)
    if q == 2:
        tr = float(np.trace(K.to_dense()))
        Tr = identity_tensor(N) * (tr / N)
        return K - Tr, Tr
    sq = np.sqrt(K.orbit_sizes)
    B = _contraction_basis(q, N)
    z = sq * K.values
    z_tl = B @ (B.T @ z)
    TL = SymmetricTensor(q, N, z_tl / sq)
    return TL, K - TL


@lru_cache(maxsize=None)
def count_pair_partitions(q):
    """Number of partitions of [q] into blocks of size one or two."""
    if q <= 1:
        return 1
    return count_pair_partitions(q - 1) + (q - 1) * count_pair_partitions(q - 2)


def pair_partitions(q):
    """Yield (pairs, singletons) for every partition of range(q) into blocks of size <= 2."""
    if q > MAX_PARTITION_ORDER:
        raise ValueError(f"order {q} exceeds the enumeration cap {MAX_PARTITION_ORDER}")

    def rec(rest):
        if not rest:
            yield (), ()
            return
        first, tail = rest[0], rest[1:]
        for pairs, singles in rec(tail):
            yield pairs, (first,) + singles
        for k, partner in enumerate(tail):
            for pairs, singles in rec(tail[:k] + tail[k + 1:]):
                yield ((first, partner),) + pairs, singles

    yield from rec(tuple(range(q)))


def product_to_wick(indices, gamma):
    """Plain product of gamma entries rebuilt from its Wick expansion."""
    indices = tuple(indices)
    q = len(indices)
    if q > MAX_PARTITION_ORDER:
        raise ValueError(f"order {q} exceeds the enumeration cap {MAX_PARTITION_ORDER}")
    gamma = np.asarray(gamma, dtype=float)
    total = np.zeros(gamma.shape[:-1])
    for pairs, singles in pair_partitions(q):
        if all(indices[a] == indices[b] for a, b in pairs):
            total = total + wick_eval(tuple(indices[s] for s in singles), gamma)
    return float(total) if total.ndim == 0 else total


def wick_identity_check(K, gamma):
    """Return (Wick-monomial sum, plain-monomial sum) for a traceless K."""
    if not K.is_traceless():
        raise ValueError("tensor is not traceless")
    return chaos_element(K, gamma), K.polynomial(gamma)


@dataclass(frozen=True)
class TensorEstimate:
    tensor: SymmetricTensor
    stderr: SymmetricTensor
    samples: int

    def z_scores(self, reference):
        """Entrywise (estimate - reference) / stderr."""
        d = self.tensor.values - reference.values
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.stderr.values > 0, d / self.stderr.values,
                         np.where(d == 0, 0.0, np.inf))
        return z


def chaos_tensor_bruteforce(E: Callable, q, N, samples, rng_seed, block=20000):
    """Monte Carlo estimate of the q-th chaos tensor of E(gamma).

    K(c) = E[E(gamma) :gamma^c:] / q! for each sorted class c.  E maps an
    array of shape (S, N) to S values.
    """
    n_cls = math.comb(N + q - 1, q)
    if N > 8 or q > 4:
        raise ValueError(f"brute force infeasible at q={q}, N={N}")
    classes = sorted_classes(q, N)
    # subtracting a constant leaves E[E :gamma^c:] unchanged for q >= 1 and
    # removes the mean from the noise
    shift = 0.0
    if q >= 1:
        pilot = stream(rng_seed, "bruteforce/pilot").standard_normal((2000, N))
        shift = float(np.mean(E(pilot)))
    s1 = np.zeros(n_cls)
    s2 = np.zeros(n_cls)
    done = 0
    b = 0
    while done < samples:
        m = min(block, samples - done)
        g = stream(rng_seed, "bruteforce", b).standard_normal((m, N))
        e = np.asarray(E(g), dtype=float)
        if not np.all(np.isfinite(e)):
            raise FloatingPointError("non-finite functional values")
        e = e - shift
        h = hermite_all(q, g)  # (q+1, m, N)
        for j, c in enumerate(classes):
            alpha = np.bincount(c, minlength=N)
            prod = e.copy()
            for l in np.nonzero(alpha)[0]:
                prod *= h[alpha[l], :, l]
            s1[j] += prod.sum()
            s2[j] += (prod * prod).sum()
        done += m
        b += 1
    mean = s1 / samples
    var = np.maximum(s2 / samples - mean ** 2, 0.0)
    se = np.sqrt(var / max(samples - 1, 1))
    f = math.factorial(q)
    return TensorEstimate(SymmetricTensor(q, N, mean / f), SymmetricTensor(q, N, se / f), samples)


def harmonic_correspondence(K, v):
    """c_{q,N} times the traceless part of K evaluated on the unit vector v."""
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ValueError("v must be a unit vector")
    TL, _ = traceless_project(K)
    c, _ = cqn_constants(K.q, K.N)
    return c * float(TL.polynomial(v))


@dataclass(frozen=True)
class AveragingResult:
    estimate: float
    stderr: float
    samples: int

    def z(self):
        if self.stderr == 0.0:
            return 0.0 if self.estimate == 0.0 else math.inf
        return self.estimate / self.stderr


def averaging_check(E: Callable, q, N, directions, samples, rng_seed, block=20000):
    """Sphere average of P_q(v) = E[E(gamma) H_q(<gamma, v>)].

    Each sample pairs gamma with `directions` fresh uniform directions, so the
    per-sample terms are i.i.d. with mean equal to the sphere average.  The
    functional is centred by its sample mean, which leaves the limit unchanged.
    """
    rng = stream(rng_seed, "averaging-audit", 0)
    g = rng.standard_normal((8, N))
    t = rng.uniform(0.1, 10.0, size=(8, 1))
    if not np.allclose(E(g), E(t * g), rtol=1e-9, atol=1e-12):
        raise ValueError("functional is not invariant under positive scaling")
    vals = []
    done = b = 0
    while done < samples:
        m = min(block, samples - done)
        r = stream(rng_seed, "averaging", b)
        g = r.standard_normal((m, N))
        v = r.standard_normal((m, directions, N))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        proj = np.einsum("sn,sdn->sd", g, v)
        h = hermite_all(q, proj)[q].mean(axis=1)
        vals.append((np.asarray(E(g), dtype=float), h))
        done += m
        b += 1
    e = np.concatenate([a for a, _ in vals])
    h = np.concatenate([c for _, c in vals])
    z = (e - e.mean()) * h
    est = float(z.mean())
    se = float(z.std(ddof=1) / math.sqrt(len(z))) if len(z) > 1 else 0.0
    return AveragingResult(est, se, samples)
