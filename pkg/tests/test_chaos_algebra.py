import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoswave.chaos_algebra import (SymmetricTensor, averaging_check, chaos_element,
                                     chaos_tensor_bruteforce, count_pair_partitions,
                                     harmonic_correspondence, identity_tensor, multiplicity_vector,
                                     pair_partitions, product_to_wick, sorted_classes,
                                     tensor_inner_isometry, traceless_project, wick_covariance,
                                     wick_eval, wick_identity_check)
from chaoswave.rng import stream
from chaoswave.special_functions import hermite_eval


def random_tensor(q, N, seed):
    rng = np.random.default_rng(seed)
    return SymmetricTensor(q, N, rng.standard_normal(len(sorted_classes(q, N))))


def test_multiplicity_examples():
    # zero-based versions of (1,2) and (4,2,4,1,3) with N=4
    assert multiplicity_vector((0, 1), 4).counts == (1, 1, 0, 0)
    assert multiplicity_vector((3, 1, 3, 0, 2), 4).counts == (1, 1, 1, 2)
    assert multiplicity_vector((0, 0, 0), 3).counts == (3, 0, 0)
    with pytest.raises(IndexError):
        multiplicity_vector((4,), 4)


@given(st.lists(st.integers(0, 5), min_size=0, max_size=7))
def test_multiplicity_permutation_invariant(idx):
    a = multiplicity_vector(idx, 6)
    assert a == multiplicity_vector(sorted(idx), 6)
    assert a.total == len(idx)


def test_wick_examples():
    assert wick_eval((0, 0), np.zeros(3)) == pytest.approx(-1.0)
    a, b = 0.7, -1.3
    g = np.array([a, b, 0.2])
    assert wick_eval((0, 1), g) == pytest.approx(a * b)
    assert wick_eval((0, 0, 1), g) == pytest.approx((a * a - 1) * b)


def test_wick_covariance_examples():
    assert wick_covariance((0, 0), (0, 0)) == 2.0
    assert wick_covariance((0, 1), (1, 0)) == 1.0
    assert wick_covariance((0, 0), (1, 1)) == 0.0


def test_isometry_examples():
    h2 = SymmetricTensor.from_entries(2, 3, {(0, 0): 1.0})
    prod = SymmetricTensor.from_entries(2, 3, {(0, 1): 0.5})
    assert tensor_inner_isometry(h2, h2) == pytest.approx(2.0)
    assert tensor_inner_isometry(prod, h2) == 0.0


def test_isometry_matches_mc():
    K, H = random_tensor(3, 4, 1), random_tensor(3, 4, 2)
    g = stream(3, "test/iso").standard_normal((200000, 4))
    xy = chaos_element(K, g) * chaos_element(H, g)
    se = xy.std(ddof=1) / math.sqrt(len(xy))
    assert abs(xy.mean() - tensor_inner_isometry(K, H)) < 4 * se


def test_traceless_examples():
    TL, Tr = traceless_project(identity_tensor(4))
    assert np.max(np.abs(TL.values)) < 1e-14
    assert np.allclose(Tr.values, identity_tensor(4).values)
    K = random_tensor(1, 5, 3)
    TL, Tr = traceless_project(K)
    assert np.allclose(TL.values, K.values) and not np.any(Tr.values)


@settings(max_examples=20)
@given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 10 ** 6))
def test_traceless_properties(q, N, seed):
    K = random_tensor(q, N, seed)
    TL, Tr = traceless_project(K)
    dense = TL.to_dense()
    assert np.max(np.abs(np.trace(dense, axis1=0, axis2=1))) < 1e-10
    assert abs(TL.inner(Tr)) < 1e-10 * (1 + K.norm() ** 2)
    TL2, _ = traceless_project(TL)
    assert np.allclose(TL2.values, TL.values, atol=1e-12)


def test_pair_partition_counts():
    for q in range(9):
        assert sum(1 for _ in pair_partitions(q)) == count_pair_partitions(q)
    assert count_pair_partitions(4) == 10
    with pytest.raises(ValueError):
        list(pair_partitions(13))


def test_product_to_wick_examples():
    rng = np.random.default_rng(5)
    for _ in range(100):
        g = rng.standard_normal(4)
        assert product_to_wick((0, 0), g) == pytest.approx(g[0] ** 2)
        assert product_to_wick((0, 1, 2), g) == pytest.approx(g[0] * g[1] * g[2])
        assert product_to_wick((0, 0, 1, 1), g) == pytest.approx(g[0] ** 2 * g[1] ** 2, rel=1e-12, abs=1e-12)


@given(st.lists(st.integers(0, 2), min_size=1, max_size=6),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_product_to_wick_property(idx, g):
    g = np.array(g)
    assert product_to_wick(idx, g) == pytest.approx(float(np.prod(g[idx])), rel=1e-9, abs=1e-9)


def test_wick_identity():
    K = SymmetricTensor.from_entries(2, 2, {(0, 0): 1.0, (1, 1): -1.0})
    rng = np.random.default_rng(0)
    for g in rng.standard_normal((20, 2)):
        lhs, rhs = wick_identity_check(K, g)
        assert lhs == pytest.approx(rhs, abs=1e-12)
    TL, _ = traceless_project(random_tensor(3, 3, 9))
    lhs, rhs = wick_identity_check(TL, rng.standard_normal((100, 3)))
    assert np.max(np.abs(lhs - rhs)) < 1e-10
    with pytest.raises(ValueError):
        wick_identity_check(identity_tensor(3), np.zeros(3))


def test_dense_roundtrip_and_serialization():
    K = random_tensor(3, 3, 4)
    assert np.allclose(SymmetricTensor.from_dense(K.to_dense()).values, K.values)
    assert np.array_equal(SymmetricTensor.loads(K.dumps()).values, K.values)


def test_bruteforce_h2():
    est = chaos_tensor_bruteforce(lambda g: hermite_eval(2, g[:, 0]), 2, 3, 100000, 1)
    ref = SymmetricTensor.from_entries(2, 3, {(0, 0): 1.0})
    assert np.max(np.abs(est.z_scores(ref))) < 4


def test_bruteforce_norm_squared():
    est = chaos_tensor_bruteforce(lambda g: np.sum(g * g, axis=1), 2, 3, 100000, 2)
    assert np.max(np.abs(est.z_scores(identity_tensor(3)))) < 4


def test_harmonic_correspondence_pure_trace():
    for v in np.random.default_rng(1).standard_normal((5, 4)):
        v /= np.linalg.norm(v)
        assert abs(harmonic_correspondence(identity_tensor(4), v)) < 1e-12
    with pytest.raises(ValueError):
        harmonic_correspondence(identity_tensor(4), np.ones(4))


def test_averaging_constant_is_zero():
    res = averaging_check(lambda g: np.ones(len(g)), 2, 3, 4, 2000, 0)
    assert res.estimate == 0.0 and res.z() == 0.0


def test_averaging_odd_ratio():
    res = averaging_check(lambda g: g[:, 0] / np.linalg.norm(g, axis=1), 2, 3, 8, 50000, 1)
    assert abs(res.z()) < 4


def test_averaging_rejects_non_homogeneous():
    with pytest.raises(ValueError):
        averaging_check(lambda g: g[:, 0], 2, 3, 4, 100, 0)
