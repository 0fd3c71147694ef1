"""Acceptance criteria 1-12, each at its stated tolerance.

Every test records a one-line verdict that conftest prints in the terminal
summary, then asserts.  The Monte Carlo criteria run at full ensemble size.
"""
import filecmp
import math
import time

import numpy as np
import pytest

from chaoswave import cli
from chaoswave.chaos_algebra import (SymmetricTensor, chaos_tensor_bruteforce,
                                     harmonic_correspondence, traceless_project,
                                     wick_identity_check)
from chaoswave.chaos_projector import chaos_spectra, chaos_variance_direct, thm_louis2_check
from chaoswave.functionals import (LevelFunctionals, cn_coefficient, cov2nd_formulas,
                                   cov4th_formulas, covariance_mc, fourth_chaos_coeffs,
                                   fourth_chaos_limits, fourth_chaos_variance, fraktur_coefficient,
                                   full_region, hemisphere, moment_integral, polar_cap,
                                   pointwise_coefficients_mc, scalar_product_fourth_moment,
                                   scalar_product_moment_mc, second_chaos_batch,
                                   uniform_exceedance_probability, variance_second_chaos)
from chaoswave.rng import stream
from chaoswave.special_functions import beta_Nq, hermite_all, jq_coefficient, sphere_surface
from chaoswave.wave_models import FieldSample, build_sphere_model, build_torus_model

from conftest import ACCEPTANCE

pytestmark = pytest.mark.slow


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def test_criterion_01_special_functions():
    x, w = np.polynomial.hermite_e.hermegauss(40)
    w = w / math.sqrt(2 * math.pi)
    H = hermite_all(12, x)
    gram = (H * w) @ H.T
    f = np.sqrt([float(math.factorial(k)) for k in range(13)])
    # compared after scaling by sqrt(k! j!), so the tolerance is relative
    err_h = float(np.max(np.abs(gram / np.outer(f, f) - np.eye(13))))
    err_b = max(abs(beta_Nq(N, 2) - sphere_surface(N - 1) / N) for N in range(2, 51))
    record(1, err_h <= 1e-10 and err_b <= 1e-10,
           f"Hermite Gram max error {err_h:.2e}, beta(N,2) max error {err_b:.2e} (tol 1e-10)")


def test_criterion_02_wick_identity():
    rng = stream(2, "acceptance/wick")
    worst = 0.0
    for q in (3, 4):
        for N in (3, 4, 5):
            for _ in range(20):
                K, _ = traceless_project(SymmetricTensor.from_dense(rng.standard_normal((N,) * q)))
                g = rng.standard_normal((100, N))
                wick, plain = wick_identity_check(K, g)
                worst = max(worst, float(np.max(np.abs(wick - plain) / np.maximum(1.0, np.abs(plain)))))
    record(2, worst <= 1e-9, f"max relative Wick discrepancy {worst:.2e} (tol 1e-9)")


def test_criterion_03_circle_tensor():
    def X(g):
        u = g / np.linalg.norm(g, axis=1, keepdims=True)
        return u[:, 0] + u[:, 0] ** 2 - u[:, 1] ** 2

    t0 = time.perf_counter()
    est = chaos_tensor_bruteforce(X, 2, 2, 10 ** 6, 3)
    ref = SymmetricTensor.from_entries(2, 2, {(0, 0): 0.25, (1, 1): -0.25})
    zmax = float(np.max(np.abs(est.z_scores(ref))))
    ts = np.linspace(0.0, math.pi, 9)
    harm = max(abs(harmonic_correspondence(ref, (math.cos(t), math.sin(t))) - math.cos(2 * t)) for t in ts)
    dt = time.perf_counter() - t0
    record(3, zmax <= 4.0 and harm <= 1e-12 and dt < 30,
           f"K2 = {np.round(est.tensor.values, 4).tolist()} max|z| {zmax:.2f}; "
           f"harmonic error {harm:.1e}; {dt:.1f}s")


@pytest.fixture(scope="module")
def cancellation_runs():
    """Uniform spectra at l = 5, 10 and the Gaussian l = 5 spectrum, 2e5 samples each."""
    out = {}
    t0 = time.perf_counter()
    for ell in (5, 10):
        m = build_sphere_model(ell)
        F = LevelFunctionals(m, "uniform", [0.0, 0.25, 0.5])
        out[("uniform", ell)] = (F.columns(), chaos_spectra(F, m.N, samples=200000, rng_seed=4,
                                                            label=f"acceptance/uniform/{ell}"))
    out["uniform_time"] = time.perf_counter() - t0
    m = build_sphere_model(5)
    F = LevelFunctionals(m, "gaussian", [0.0, 0.5])
    out[("gaussian", 5)] = (F.columns(), chaos_spectra(F, m.N, samples=200000, rng_seed=5,
                                                       label="acceptance/gaussian/5"))
    return out


def test_criterion_04_uniform_cancellation(cancellation_runs):
    worst, cells = 0.0, []
    for ell in (5, 10):
        cols, spectra = cancellation_runs[("uniform", ell)]
        for (name, u), sp in zip(cols, spectra):
            z = max(abs(sp.z(1)), abs(sp.z(2)))
            worst = max(worst, z)
            cells.append(f"l{ell}/{name}/u{u:g}:{sp.z(1):+.1f},{sp.z(2):+.1f}")
    dt = cancellation_runs["uniform_time"]
    record(4, worst <= 4.0 and len(cells) == 12 and dt < 600,
           f"max |z| over Var[1], Var[2] in 12 cells = {worst:.2f}; {dt:.0f}s; " + " ".join(cells))


def test_criterion_05_gaussian_contrast(cancellation_runs):
    cols, spectra = cancellation_runs[("gaussian", 5)]
    sp = dict(zip(cols, spectra))
    a5, a0 = sp[("area", 0.5)], sp[("area", 0.0)]
    ok = a5.z(2) >= 5.0 and abs(a0.z(2)) <= 4.0
    record(5, ok, f"u=0.5: Var[2] = {a5.var(2):.4f} +- {a5.se(2):.4f} (z {a5.z(2):.1f}); "
                  f"u=0: Var[2] = {a0.var(2):.2e} (z {a0.z(2):.2f})")


def test_criterion_06_second_chaos_identity():
    m = build_sphere_model(8)
    g = stream(6, "acceptance/secondchaos").standard_normal((1000, m.N))
    full = second_chaos_batch(m, g, 0.4, full_region(m))
    scale = 0.5 * cn_coefficient(m.N, 0.4, m.volume) * np.sum(g * g, axis=1) * m.volume / (m.N - 1)
    rel = float(np.max(np.abs(full) / scale))
    # any hemisphere is mapped onto its complement by x -> -x, under which the second chaos
    # integrand is invariant, so the hemisphere value is half the A=M value and vanishes
    hemi = hemisphere(m)
    hvals = np.concatenate([second_chaos_batch(m, stream(6, "acceptance/hemi", b).standard_normal((20000, m.N)),
                                               0.4, hemi) for b in range(5)])
    cap = polar_cap(m, math.pi / 3)
    cvals = np.concatenate([second_chaos_batch(m, stream(6, "acceptance/cap", b).standard_normal((20000, m.N)),
                                               0.4, cap) for b in range(5)])
    mc = float(cvals.var(ddof=1))
    exact = variance_second_chaos(m, 0.4, cap)
    dev = abs(mc / exact - 1.0)
    hemi_mc = float(hvals.var(ddof=1)) / exact
    hemi_exact = abs(variance_second_chaos(m, 0.4, hemi)) / exact
    record(6, rel <= 1e-9 and dev <= 0.03 and hemi_mc <= 1e-9 and hemi_exact <= 1e-9,
           f"A=M max relative value {rel:.1e} (tol 1e-9); hemisphere MC and exact variance "
           f"{hemi_mc:.1e}, {hemi_exact:.1e} of the cap scale (both vanish); pi/3 cap MC var {mc:.5f} "
           f"vs {exact:.5f}, off by {100 * dev:.2f}% (tol 3%)")


def test_criterion_07_coefficient_oracles():
    t0 = time.perf_counter()
    worst, parts = 0.0, []
    north = np.array([0.0, 0.0, 1.0])
    for ell in (5, 10):
        m = build_sphere_model(ell)
        for u in (0.2, 0.4):
            mc = pointwise_coefficients_mc(m, u, north, 2 * 10 ** 6, 7)
            exact = {"C_N": cn_coefficient(m.N, u, m.volume),
                     "C44": fourth_chaos_coeffs(m.N, u, m.volume).C44}
            for k in mc:
                z = (mc[k][0] - exact[k]) / mc[k][1]
                worst = max(worst, abs(z))
                parts.append(f"l{ell}/u{u}/{k}:{z:+.1f}")
    lim_err = 0.0
    vol = 4 * math.pi
    for u in (0.2, 0.4):
        v = u * math.sqrt(vol)
        lim_err = max(lim_err, abs(cn_coefficient(10 ** 4, u, vol) / jq_coefficient(2, v) - 1.0),
                      abs(fourth_chaos_coeffs(10 ** 4, u, vol).C44 / fourth_chaos_limits(u, vol).C44 - 1.0))
    dt = time.perf_counter() - t0
    record(7, worst <= 4.0 and lim_err <= 0.01 and dt < 300,
           f"max |z| {worst:.2f} ({' '.join(parts)}); N=1e4 limit error {100 * lim_err:.3f}%; {dt:.0f}s")


def test_criterion_08_appendix_covariances():
    t0 = time.perf_counter()
    m = build_sphere_model(5)
    worst, ks = 0.0, []
    for i, c in enumerate((cli.P5_ROOT, 0.9)):
        x, z = cli._point_pair(c)
        k, mc = covariance_mc(m, x, z, 10 ** 6, 80 + i)
        ks.append(k)
        ref = dict(cov2nd_formulas(m.N, k)._asdict())
        ref.update(cov4th_formulas(m.N, k)._asdict())
        for name, (est, se) in mc.items():
            worst = max(worst, abs(est - ref[name]) / se)
    zs = []
    for N in (1, 3, 10):
        est, se = scalar_product_moment_mc(N, 10 ** 6, 8)
        zs.append((est - scalar_product_fourth_moment(N)) / se)
    dt = time.perf_counter() - t0
    ok = worst <= 4.0 and max(map(abs, zs)) <= 4.0 and dt < 300
    record(8, ok, f"9 formulas at k = {ks[0]:.1e}, {ks[1]:.4f}: max |z| {worst:.2f}; "
                  f"3N(N+2) z = {', '.join(f'{z:+.2f}' for z in zs)}; {dt:.1f}s")


def test_criterion_09_asymptotics():
    t0 = time.perf_counter()
    ells = (64, 128, 256)
    scaled = [moment_integral(l, 4) * l ** 2 / math.log(l) for l in ells]
    ratios = [b / a for a, b in zip(scaled, scaled[1:])]
    ref = fourth_chaos_variance(build_sphere_model(10), 0.3).leading
    zeros = [fourth_chaos_variance(10, u).leading for u in (0.0, math.sqrt(3 / (4 * math.pi)),
                                                            -math.sqrt(3 / (4 * math.pi)))]
    dt = time.perf_counter() - t0
    ok = all(abs(r - 1.0) <= 0.10 for r in ratios) and max(zeros) <= 1e-25 * ref and ref > 0 and dt < 60
    record(9, ok, f"doubling ratios {', '.join(f'{r:.4f}' for r in ratios)}; leading term at the "
                  f"three zeros {max(zeros):.1e}, at u=0.3 {ref:.3e}; {dt:.1f}s")


def test_criterion_10_parseval():
    N, u, vol = 13, 0.3, 4 * math.pi
    p = uniform_exceedance_probability(N, u, vol)
    total = sum(fraktur_coefficient(N, q, i, u, vol) ** 2 for q in range(1, 13) for i in range(q + 1))
    frac = total / (p * (1 - p))
    # the unresolved mass decays like a power of Q; a 1% gap is not reachable at Q = 12
    record(10, abs(frac - 1.0) <= 0.01,
           f"sum over q <= 12 reaches {100 * frac:.2f}% of p(1-p) = {p * (1 - p):.5f} (tol 1%)")


def test_criterion_11_torus_structure():
    t0 = time.perf_counter()
    mono = build_torus_model(5)
    area = LevelFunctionals(mono, "uniform", [0.3])
    sp = chaos_spectra(area, mono.N, samples=100000, rng_seed=11, label="acceptance/torus-mono")[0]
    cv = chaos_variance_direct(area, 2, mono.N, 100000, 11, label="acceptance/torus-mono/direct")[0]
    window = build_torus_model((1, 2))
    res = thm_louis2_check(window, lambda f, g: (f >= 0.3) * g, 400000, 11)
    dt = time.perf_counter() - t0
    zd = cv.estimate / cv.stderr if cv.stderr > 0 else 0.0
    ok = abs(sp.z(2)) <= 4.0 and abs(zd) <= 4.0 and res.fit_residual <= 0.10 and dt < 600
    record(11, ok, f"monochromatic n=5 area Var[2]: Mehler z {sp.z(2):+.2f}, direct z {zd:+.2f}; "
                   f"window (1,2) rank-one residual {100 * res.fit_residual:.2f}% (tol 10%); {dt:.0f}s")


def test_criterion_12_determinism(tmp_path):
    base = dict(study="cancellation-scan", params=[3], kinds=["uniform", "gaussian"],
                thresholds=[0.0, 0.3], samples=6000, seed=12, direct_orders=[2])
    dirs = []
    for tag, workers in (("a", 1), ("b", 1), ("c", 2)):
        cfg = cli.make_config(dict(base, workers=workers, output_dir=str(tmp_path / tag)))
        status, _ = cli.run(cfg)
        assert status == 0
        dirs.append(tmp_path / tag)
    same = all(filecmp.cmp(dirs[0] / f, d / f, shallow=False)
               for d in dirs[1:] for f in ("results.csv", "spectrum.csv"))
    record(12, same, "results.csv and spectrum.csv byte-identical across two runs and 1 vs 2 workers"
           if same else "CSV outputs differ between runs")
