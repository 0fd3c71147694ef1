"""Experiment runner.

    chaoswave <study> --config <path> [--seed S] [--samples N] [--out DIR]

Config files are INI-style (sections are only for readability, keys are
flat, values are JSON literals or bare strings) or JSON with the same keys.
Each run writes results.csv, spectrum.csv where it applies, meta.json and
two-column series under plotdata/.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .chaos_algebra import (SymmetricTensor, chaos_tensor_bruteforce, harmonic_correspondence,
                            traceless_project, wick_identity_check)
from .chaos_projector import (DEFAULT_Q, DEFAULT_T_GRID, SPECTRUM_HEADER, chaos_spectra,
                              chaos_variance_direct, integrated_functional, thm_louis2_check,
                              write_spectrum_csv)
from .functionals import (RESULTS_HEADER, LevelFunctionals, cn_coefficient, cov2nd_formulas,
                          cov4th_formulas, covariance_mc, fourth_chaos_coeffs, fourth_chaos_limits,
                          fourth_chaos_variance, moment_integral, pointwise_coefficients_mc,
                          scalar_product_fourth_moment, scalar_product_moment_mc, write_results_csv)
from .rng import stream
from .special_functions import jq_coefficient
from .wave_models import AuditError, build_model, build_sphere_model, lattice_points

STUDIES = ("cancellation-scan", "covariance-check", "coefficient-oracle", "asymptotics",
           "tensor-verify", "louis2-check")
EXIT_OK, EXIT_CONFIG, EXIT_AUDIT, EXIT_IO = 0, 2, 3, 4

# a root of P_5, so the kernel vanishes there
P5_ROOT = 0.5384693101056831


@dataclass
class ExperimentConfig:
    study: str = ""
    manifold: str = "sphere2"
    params: list = field(default_factory=lambda: [5])
    kinds: list = field(default_factory=lambda: ["uniform"])
    thresholds: list = field(default_factory=list)
    samples: int = 10000
    q_max: int = DEFAULT_Q
    t_grid: list = field(default_factory=lambda: list(DEFAULT_T_GRID))
    lat_order: int | None = None
    nlon: int | None = None
    grid_res: int | None = None
    seed: int = 0
    output_dir: str = "out"
    workers: int = 1
    direct_orders: list = field(default_factory=list)
    point_cosines: list = field(default_factory=lambda: [P5_ROOT, 0.9])
    scalar_dims: list = field(default_factory=lambda: [1, 3, 10])
    limit_N: int = 10000

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def _typed(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def parse_config(text, fmt="ini"):
    """Parse config text into a flat dict (no validation)."""
    if fmt == "json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("top level of a JSON config must be an object")
        flat = {}
        for k, v in data.items():
            # one level of nesting mirrors the INI sections
            if isinstance(v, dict) and k not in _FIELDS:
                flat.update(v)
            else:
                flat[k] = v
        return flat
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text if text.lstrip().startswith("[") else "[main]\n" + text)
    flat = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            flat[k] = _typed(v)
    return flat


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, "json" if str(path).endswith(".json") else "ini")


def make_config(data):
    """Build an ExperimentConfig from a flat dict; unknown keys are reported by validate."""
    known = {k: v for k, v in data.items() if k in _FIELDS}
    cfg = ExperimentConfig(**known)
    cfg._unknown = sorted(k for k in data if k not in _FIELDS)
    return cfg


# ---------------------------------------------------------------- validation

def _model_dims(cfg, p):
    """(N, volume, label) for one model parameter, or raise ValueError."""
    if cfg.manifold == "sphere2":
        if not isinstance(p, int) or p < 1:
            raise ValueError(f"sphere degree must be a positive integer, got {p!r}")
        return 2 * p + 1, 4.0 * math.pi
    if cfg.manifold == "torus2":
        window = p if isinstance(p, list) else [p]
        N = 0
        for n in window:
            if not isinstance(n, int) or n < 1:
                raise ValueError(f"torus parameter must be a positive integer, got {n!r}")
            pts = lattice_points(n)
            if len(pts) == 0:
                raise ValueError(f"{n} is not a sum of two squares")
            N += len(pts)
        return N, 1.0
    raise ValueError(f"unknown manifold {cfg.manifold!r}")


def validate(cfg):
    """Schema and physics checks; returns a list of findings, empty when fine."""
    findings = []
    for k in getattr(cfg, "_unknown", []):
        findings.append(f"unknown key {k!r}")
    if cfg.study not in STUDIES:
        findings.append(f"unknown study {cfg.study!r}; expected one of {', '.join(STUDIES)}")
    for name in ("samples", "workers", "q_max", "limit_N"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or v <= 0:
            findings.append(f"{name} must be a positive integer")
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2 ** 64:
        findings.append("seed must be an integer in [0, 2^64)")
    if not isinstance(cfg.thresholds, list) or not isinstance(cfg.params, list):
        findings.append("thresholds and params must be lists")
        return findings
    needs_levels = cfg.study in ("cancellation-scan", "coefficient-oracle", "asymptotics", "louis2-check")
    if not cfg.params and cfg.study != "tensor-verify":
        findings.append("nothing to do: empty params")
    if needs_levels and not cfg.thresholds:
        findings.append("nothing to do: empty thresholds")
    for kind in cfg.kinds:
        if kind not in ("uniform", "gaussian"):
            findings.append(f"unknown field kind {kind!r}")
    if cfg.study == "louis2-check" and cfg.manifold != "torus2":
        findings.append("louis2-check needs manifold torus2")
    if cfg.study in ("covariance-check", "asymptotics") and cfg.manifold != "sphere2":
        findings.append(f"{cfg.study} needs manifold sphere2")
    for p in cfg.params:
        try:
            N, vol = _model_dims(cfg, p)
        except ValueError as e:
            findings.append(str(e))
            continue
        for u in cfg.thresholds:
            if not isinstance(u, (int, float)) or abs(u) >= math.sqrt(N / vol):
                findings.append(f"threshold outside admissible band: u={u} for param {p} "
                                f"(|u| < {math.sqrt(N / vol):.4g})")
        if cfg.manifold == "sphere2" and cfg.study in ("cancellation-scan", "coefficient-oracle",
                                                      "covariance-check"):
            if cfg.lat_order is not None and cfg.lat_order < 2 * p + 2:
                findings.append(f"quadrature under-resolved: lat_order {cfg.lat_order} < 2*ell+2 = {2 * p + 2}")
            if cfg.nlon is not None and cfg.nlon < 2 * p + 1:
                findings.append(f"quadrature under-resolved: nlon {cfg.nlon} < 2*ell+1 = {2 * p + 1}")
        if cfg.manifold == "torus2" and cfg.grid_res is not None:
            window = p if isinstance(p, list) else [p]
            kmax = max(int(math.isqrt(n)) for n in window)
            if cfg.grid_res <= 2 * kmax:
                findings.append(f"quadrature under-resolved: grid_res {cfg.grid_res} <= {2 * kmax}")
    if cfg.study in ("cancellation-scan", "louis2-check"):
        t = cfg.t_grid
        if not t or any(not isinstance(x, (int, float)) or not 0.0 < x < 1.0 for x in t):
            findings.append("t_grid values must lie in (0, 1)")
        elif len(set(t)) != len(t):
            findings.append("t_grid values must be distinct")
        elif isinstance(cfg.q_max, int) and (cfg.q_max + 1) // 2 > len(t):
            findings.append(f"t_grid too short for q_max={cfg.q_max}: need ceil(q_max/2) <= {len(t)}")
    if cfg.study == "covariance-check":
        if any(not isinstance(c, (int, float)) or abs(c) > 1 for c in cfg.point_cosines):
            findings.append("point_cosines must lie in [-1, 1]")
    return findings


# ---------------------------------------------------------------- studies

def _row(model, param, N, u, functional, estimate, stderr, samples, seed):
    return dict(model=model, param=param, N=N, u=u, functional=functional,
                estimate=float(estimate), stderr=float(stderr), samples=samples, seed=seed)


def _pstr(p):
    return "x".join(map(str, p)) if isinstance(p, list) else str(p)


def _model(cfg, p):
    if cfg.manifold == "sphere2":
        return build_sphere_model(p, cfg.lat_order, cfg.nlon)
    return build_model("torus2", tuple(p) if isinstance(p, list) else p, grid_res=cfg.grid_res)


def study_cancellation_scan(cfg):
    res, spec, plots, summary = [], [], {}, {}
    for p in cfg.params:
        model = _model(cfg, p)
        for kind in cfg.kinds:
            F = LevelFunctionals(model, kind, cfg.thresholds)
            label = f"scan/{model.label()}/{kind}"
            spectra = chaos_spectra(F, model.N, cfg.q_max, cfg.t_grid, cfg.samples, cfg.seed,
                                    label=label, workers=cfg.workers)
            direct = {q: chaos_variance_direct(F, q, model.N, cfg.samples, cfg.seed,
                                               label=f"{label}/direct{q}", workers=cfg.workers)
                      for q in cfg.direct_orders}
            mname = f"{cfg.manifold}/{kind}"
            for j, ((fname, u), sp) in enumerate(zip(F.columns(), spectra)):
                for q in range(1, cfg.q_max + 1):
                    spec.append(dict(functional=fname, model=mname, param=_pstr(p), u=u, q=q,
                                     var_q=sp.var(q), stderr_q=sp.se(q), samples=sp.samples,
                                     seed=cfg.seed, condition_number=sp.condition_number))
                res.append(_row(mname, _pstr(p), model.N, u, f"{fname}.var", sp.total_variance,
                                sp.total_variance_stderr, sp.samples, cfg.seed))
                for q, cvs in direct.items():
                    res.append(_row(mname, _pstr(p), model.N, u, f"{fname}.var{q}.direct",
                                    cvs[j].estimate, cvs[j].stderr, cvs[j].samples, cfg.seed))
                key = f"{kind}_{_pstr(p)}_{fname}_u{u:g}"
                plots[f"spectrum_{key}"] = [(q, sp.var(q)) for q in range(1, cfg.q_max + 1)]
                summary[key] = {"z1": sp.z(1), "z2": sp.z(2) if cfg.q_max >= 2 else None}
    return res, spec, plots, summary


def _point_pair(c):
    x = np.array([0.0, 0.0, 1.0])
    z = np.array([math.sqrt(max(0.0, 1.0 - c * c)), 0.0, c])
    return x, z


def study_covariance_check(cfg):
    res, plots, summary = [], {}, {}
    for p in cfg.params:
        model = _model(cfg, p)
        for i, c in enumerate(cfg.point_cosines):
            x, z = _point_pair(c)
            k, mc = covariance_mc(model, x, z, cfg.samples, cfg.seed + i)
            ref = dict(cov2nd_formulas(model.N, k)._asdict())
            ref.update(cov4th_formulas(model.N, k)._asdict())
            for name, (est, se) in mc.items():
                res.append(_row("sphere2", p, model.N, c, f"cov.{name}.mc", est, se, cfg.samples, cfg.seed))
                res.append(_row("sphere2", p, model.N, c, f"cov.{name}.formula", ref[name], 0.0,
                                0, cfg.seed))
                summary[f"{p}_{c:g}_{name}"] = (est - ref[name]) / se if se > 0 else 0.0
            summary[f"{p}_{c:g}_k"] = k
    for N in cfg.scalar_dims:
        est, se = scalar_product_moment_mc(N, cfg.samples, cfg.seed)
        ref = scalar_product_fourth_moment(N)
        res.append(_row("gaussian-vector", N, N, 0.0, "scalar4.mc", est, se, cfg.samples, cfg.seed))
        res.append(_row("gaussian-vector", N, N, 0.0, "scalar4.formula", ref, 0.0, 0, cfg.seed))
        summary[f"scalar4_{N}"] = (est - ref) / se
    ks = np.linspace(-1.0, 1.0, 101)
    N0 = 2 * cfg.params[0] + 1
    for name in ("hh", "ss", "cross"):
        plots[f"cov2_{name}"] = [(k, getattr(cov2nd_formulas(N0, k), name)) for k in ks]
    return res, [], plots, summary


def study_coefficient_oracle(cfg):
    res, plots, summary = [], {}, {}
    north = np.array([0.0, 0.0, 1.0])
    for p in cfg.params:
        model = _model(cfg, p)
        for u in cfg.thresholds:
            mc = pointwise_coefficients_mc(model, u, north, cfg.samples, cfg.seed)
            exact = {"C_N": cn_coefficient(model.N, u, model.volume),
                     "C44": fourth_chaos_coeffs(model.N, u, model.volume).C44}
            for name, (est, se) in mc.items():
                res.append(_row(model.manifold, _pstr(p), model.N, u, f"{name}.mc", est, se,
                                cfg.samples, cfg.seed))
                res.append(_row(model.manifold, _pstr(p), model.N, u, f"{name}.formula",
                                exact[name], 0.0, 0, cfg.seed))
                summary[f"{_pstr(p)}_u{u:g}_{name}"] = (est - exact[name]) / se
    vol = 4.0 * math.pi
    for u in cfg.thresholds:
        lim = fourth_chaos_limits(u, vol)
        c44 = fourth_chaos_coeffs(cfg.limit_N, u, vol)
        cn = cn_coefficient(cfg.limit_N, u, vol)
        j2 = jq_coefficient(2, u * math.sqrt(vol))
        for name, a, b in (("C_N", cn, j2), ("C44", c44.C44, lim.C44),
                           ("C42", c44.C42, lim.C42), ("C40", c44.C40, lim.C40)):
            res.append(_row("limit", cfg.limit_N, cfg.limit_N, u, f"{name}.finiteN", a, 0.0, 0, cfg.seed))
            res.append(_row("limit", cfg.limit_N, cfg.limit_N, u, f"{name}.limit", b, 0.0, 0, cfg.seed))
            summary[f"limit_u{u:g}_{name}_relerr"] = abs(a - b) / abs(b) if b != 0 else abs(a)
        plots[f"cn_convergence_u{u:g}"] = [(math.log(N), cn_coefficient(N, u, vol))
                                           for N in (11, 21, 41, 81, 161, 321, 641, 1281)]
    return res, [], plots, summary


def study_asymptotics(cfg):
    res, summary, plots = [], {}, {}
    ells = sorted(cfg.params)
    for u in cfg.thresholds:
        series = []
        for ell in ells:
            N = 2 * ell + 1
            fc = fourth_chaos_variance(ell, u)
            I4 = moment_integral(ell, 4)
            res.append(_row("sphere2", ell, N, u, "var4.leading", fc.leading, 0.0, 0, cfg.seed))
            res.append(_row("sphere2", ell, N, u, "var4.remainder", fc.remainder_bound, 0.0, 0, cfg.seed))
            res.append(_row("sphere2", ell, N, u, "I4.scaled", I4 * ell ** 2 / math.log(ell), 0.0, 0, cfg.seed))
            total = fc.leading + fc.remainder_bound
            if total > 0:
                series.append((math.log(N), math.log(total * N * N)))
        plots[f"var4_u{u:g}"] = series
        if len(series) >= 2:
            xs, ys = np.array(series).T
            summary[f"slope_u{u:g}"] = float(np.polyfit(xs, ys, 1)[0])
    ratios = []
    for a, b in zip(ells, ells[1:]):
        ra = moment_integral(a, 4) * a ** 2 / math.log(a)
        rb = moment_integral(b, 4) * b ** 2 / math.log(b)
        ratios.append(rb / ra)
    summary["I4_doubling_ratios"] = ratios
    return res, [], plots, summary


def study_tensor_verify(cfg):
    res, summary = [], {}
    rng = stream(cfg.seed, "tensor-verify")
    worst_wick, worst_trace = 0.0, 0.0
    for q in (3, 4):
        for N in (3, 4, 5):
            for _ in range(20):
                K, _ = traceless_project(SymmetricTensor.from_dense(rng.standard_normal((N,) * q)))
                worst_trace = max(worst_trace, K.contract().norm() / K.norm())
                g = rng.standard_normal((100, N))
                wick, plain = wick_identity_check(K, g)
                worst_wick = max(worst_wick, float(np.max(np.abs(wick - plain))
                                                   / max(1.0, np.max(np.abs(plain)))))
    rows = [("wick_identity", worst_wick, 1e-9), ("traceless_audit", worst_trace, 1e-10)]

    def circle_example(g):
        u = g / np.linalg.norm(g, axis=1, keepdims=True)
        return u[:, 0] + u[:, 0] ** 2 - u[:, 1] ** 2

    est = chaos_tensor_bruteforce(circle_example, 2, 2, cfg.samples, cfg.seed)
    ref = SymmetricTensor.from_entries(2, 2, {(0, 0): 0.25, (1, 1): -0.25})
    zmax = float(np.max(np.abs(est.z_scores(ref))))
    rows.append(("circle_tensor_maxz", zmax, 4.0))
    t = np.linspace(0.0, math.pi, 7)
    harm = np.array([harmonic_correspondence(ref, (math.cos(a), math.sin(a))) for a in t])
    rows.append(("circle_harmonic", float(np.max(np.abs(harm - np.cos(2 * t)))), 1e-12))
    for name, val, tol in rows:
        res.append(_row("tensor", "-", "-", 0.0, name, val, tol, cfg.samples, cfg.seed))
        summary[name] = {"value": val, "tolerance": tol, "pass": bool(val <= tol)}
    return res, [], {}, summary


def study_louis2_check(cfg):
    res, summary = [], {}
    u = float(cfg.thresholds[0])
    for p in cfg.params:
        model = _model(cfg, p)

        def F(f, grad):
            return (f >= u) * grad

        out = thm_louis2_check(model, F, cfg.samples, cfg.seed)
        res.append(_row("torus2", _pstr(p), model.N, u, "louis2.residual", out.fit_residual, 0.0,
                        cfg.samples, cfg.seed))
        res.append(_row("torus2", _pstr(p), model.N, u, "louis2.mono_var2", out.monochromatic_var2,
                        out.monochromatic_var2_stderr, cfg.samples, cfg.seed))
        summary[f"{_pstr(p)}_residual"] = out.fit_residual
        summary[f"{_pstr(p)}_mono_z"] = out.monochromatic_var2 / out.monochromatic_var2_stderr
        # monochromatic excursion area, by both routes
        n1 = p[0] if isinstance(p, list) else p
        mono = build_model("torus2", n1, grid_res=model.grid.shape[0])
        area = LevelFunctionals(mono, "uniform", [u])
        sp = chaos_spectra(area, mono.N, cfg.q_max, cfg.t_grid, cfg.samples, cfg.seed,
                           label=f"louis2/area/{n1}")[0]
        cv = chaos_variance_direct(area, 2, mono.N, cfg.samples, cfg.seed, label=f"louis2/area/{n1}/direct")[0]
        res.append(_row("torus2", n1, mono.N, u, "area.var2.mehler", sp.var(2), sp.se(2), sp.samples, cfg.seed))
        res.append(_row("torus2", n1, mono.N, u, "area.var2.direct", cv.estimate, cv.stderr, cv.samples, cfg.seed))
        summary[f"{n1}_area_var2_z_mehler"] = sp.z(2)
        summary[f"{n1}_area_var2_z_direct"] = cv.estimate / cv.stderr if cv.stderr > 0 else 0.0
    return res, [], {}, summary


STUDY_FUNCS = {
    "cancellation-scan": study_cancellation_scan,
    "covariance-check": study_covariance_check,
    "coefficient-oracle": study_coefficient_oracle,
    "asymptotics": study_asymptotics,
    "tensor-verify": study_tensor_verify,
    "louis2-check": study_louis2_check,
}


# ---------------------------------------------------------------- run

def _versions():
    import numba
    import scipy
    return {"chaoswave": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def _write_dat(path, series):
    with open(path, "w") as fh:
        for x, y in series:
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def run(cfg):
    """Run a validated config; returns (exit status, summary dict or message)."""
    findings = validate(cfg)
    if findings:
        return EXIT_CONFIG, findings
    t0 = time.perf_counter()
    try:
        res, spec, plots, summary = STUDY_FUNCS[cfg.study](cfg)
    except AuditError as e:
        return EXIT_AUDIT, [f"audit failure: {e.invariant}: {e}"]
    wall = time.perf_counter() - t0
    try:
        os.makedirs(os.path.join(cfg.output_dir, "plotdata"), exist_ok=True)
        write_results_csv(res, os.path.join(cfg.output_dir, "results.csv"))
        if spec:
            write_spectrum_csv(spec, os.path.join(cfg.output_dir, "spectrum.csv"))
        for name, series in plots.items():
            _write_dat(os.path.join(cfg.output_dir, "plotdata", f"{name}.dat"), series)
        meta = {"config": cfg.to_dict(), "versions": _versions(), "wall_time_s": wall,
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "summary": _jsonable(summary)}
        with open(os.path.join(cfg.output_dir, "meta.json"), "w") as fh:
            json.dump(_jsonable(meta), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        return EXIT_IO, [f"I/O failure: {e}"]
    return EXIT_OK, summary


def main(argv=None):
    ap = argparse.ArgumentParser(prog="chaoswave", description=__doc__.splitlines()[0])
    ap.add_argument("study", choices=STUDIES)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--samples", type=int)
    ap.add_argument("--out")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args(argv)
    try:
        data = load_config(args.config)
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, configparser.Error) as e:
        print(f"error: malformed config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    data["study"] = args.study
    for key, val in (("seed", args.seed), ("samples", args.samples), ("output_dir", args.out),
                     ("workers", args.workers)):
        if val is not None:
            data[key] = val
    try:
        cfg = make_config(data)
    except TypeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    status, info = run(cfg)
    if status != EXIT_OK:
        for line in info:
            print(f"error: {line}", file=sys.stderr)
        return status
    print(f"{cfg.study}: wrote {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
