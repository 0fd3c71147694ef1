import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoswave.special_functions import legendre_eval
from chaoswave.wave_models import (AuditError, FieldSample, audit_model, build_model,
                                   build_sphere_model, build_torus_model, covariance_kernel,
                                   eval_field, export_field_csv, gamma_x_project, grid_values,
                                   lattice_points, sample_field, sphere_grid)


def random_unit(n, dim=3, seed=0):
    v = np.random.default_rng(seed).standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_sphere_dimensions():
    m = build_sphere_model(1)
    assert m.N == 3 and m.volume == pytest.approx(4 * math.pi)
    y = m.basis_at(random_unit(50))
    assert np.allclose(np.sum(y * y, axis=1), 3 / (4 * math.pi))
    assert build_sphere_model(5).N == 11


def test_sphere_rejects_degree_zero():
    with pytest.raises(ValueError):
        build_sphere_model(0)


def test_torus_dimensions():
    assert lattice_points(1) == [(-1, 0), (0, -1), (0, 1), (1, 0)]
    assert build_torus_model(1).N == 4
    assert build_torus_model(5).N == 8
    with pytest.raises(ValueError):
        build_torus_model(3)
    assert build_torus_model((1, 2)).N == 8


def test_under_resolved_grid_fails_audit():
    with pytest.raises(AuditError) as exc:
        build_sphere_model(6, lat_order=4)
    assert exc.value.invariant == "orthonormality"


def test_audit_weights():
    m = build_sphere_model(2)
    bad = m.__class__(m.manifold, m.param, m.N, 1.0, m.grid, m.basis, m.eigenvalues)
    with pytest.raises(AuditError):
        audit_model(bad)


def test_build_model_dispatch():
    assert build_model("sphere2", 3).N == 7
    assert build_model("torus2", 2).N == 4
    with pytest.raises(ValueError):
        build_model("klein", 1)


@pytest.mark.parametrize("lat,nlon", [(4, 8), (10, 21)])
def test_sphere_grid_weights(lat, nlon):
    g = sphere_grid(lat, nlon)
    assert g.weights.sum() == pytest.approx(4 * math.pi, rel=1e-12)
    assert np.allclose(np.linalg.norm(g.points, axis=1), 1.0)


def test_covariance_examples():
    m = build_sphere_model(2)
    x = np.array([0.0, 0.0, 1.0])
    assert covariance_kernel(m, x, x) == pytest.approx(1.0)
    assert covariance_kernel(m, x, np.array([1.0, 0.0, 0.0])) == pytest.approx(-0.5)
    t = build_torus_model(1)
    assert covariance_kernel(t, np.zeros(2), np.array([0.5, 0.0])) == pytest.approx(0.0, abs=1e-14)
    assert covariance_kernel(t, np.array([0.3, 0.1]), np.array([0.3, 0.1])) == pytest.approx(1.0)


@settings(max_examples=25)
@given(st.integers(1, 12), st.integers(0, 10 ** 6))
def test_sphere_kernel_is_addition_theorem(ell, seed):
    m = build_sphere_model(ell)
    x, z = random_unit(2, seed=seed)
    via_basis = (m.volume / m.N) * float(m.basis_at(x) @ m.basis_at(z))
    assert via_basis == pytest.approx(legendre_eval(ell, float(x @ z)), abs=1e-11)


def test_uniform_field_bounded():
    m = build_sphere_model(4)
    s = sample_field(m, "uniform", 3)
    vals = eval_field(s, random_unit(1000, seed=2))
    assert np.max(np.abs(vals)) <= m.c * (1 + 1e-12)
    t = build_torus_model(5)
    s = sample_field(t, "uniform", 3)
    vals = eval_field(s, np.random.default_rng(0).uniform(size=(1000, 2)))
    assert np.max(np.abs(vals)) <= t.c * (1 + 1e-12)


def test_unit_gamma_field():
    m = build_sphere_model(3)
    e = np.zeros(m.N)
    e[2] = 5.0
    x = random_unit(10, seed=4)
    assert np.allclose(eval_field(FieldSample(m, e, "uniform"), x), m.basis_at(x)[:, 2])


def test_gaussian_variance_is_one():
    m = build_sphere_model(3)
    g = np.random.default_rng(0).standard_normal((40000, m.N))
    vals = grid_values(m, g, "gaussian")
    assert abs(vals[:, 5].var() - 1.0) < 0.03


def test_sampling_reproducible():
    m = build_sphere_model(3)
    a, b = sample_field(m, "gaussian", 7, 2), sample_field(m, "gaussian", 7, 2)
    assert np.array_equal(a.gamma, b.gamma)
    assert not np.array_equal(a.gamma, sample_field(m, "gaussian", 7, 3).gamma)
    with pytest.raises(ValueError):
        sample_field(m, "poisson", 1)


def test_gamma_x_projection():
    m = build_sphere_model(2)
    x = np.array([0.0, 0.0, 1.0])
    y = m.basis_at(x)
    g = np.random.default_rng(1).standard_normal(m.N)
    g0 = g - (g @ y) / (y @ y) * y  # a realization vanishing at x
    assert np.allclose(gamma_x_project(FieldSample(m, g0, "gaussian"), x), g0)
    proj = gamma_x_project(FieldSample(m, g, "gaussian"), x)
    assert abs(proj @ y) < 1e-12


def test_export_csv(tmp_path):
    m = build_sphere_model(1)
    s = sample_field(m, "gaussian", 0)
    p = tmp_path / "f.csv"
    export_field_csv(s, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "node_index,x,y,z,value"
    assert len(lines) == m.grid.size + 1
    assert float(lines[1].split(",")[4]) == s.grid_values()[0]
