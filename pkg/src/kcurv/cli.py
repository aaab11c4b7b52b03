"""Batch command-line entry point.

Commands operate on a flat key-value config file (dotted sections, `key =
value` lines, values in JSON syntax) and write deterministic JSON/CSV
artifacts to the output directory.  Exit codes: 0 all requested checks
passed, 1 numerical failure (JSON error report written), 2 config error.
"""

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import manifold, solver, verify
from .errors import ConfigError, KcurvError
from .sphere import build_grid, random_bandlimited
from .symfunc import sigma_k

SCHEMA_VERSION = 1

KNOWN_KEYS = {
    "metric.family", "metric.dim", "metric.kappa", "metric.epsilon",
    "metric.center", "metric.Q", "metric.skew", "metric.radius", "metric.poly",
    "grid.L",
    "solver.k", "solver.rho_list", "solver.tol_inner", "solver.tol_outer",
    "solver.max_inner", "solver.max_outer", "solver.damping",
    "solver.seed_mode", "solver.center", "solver.refine_center",
    "run.seed", "run.threads",
    "verify.radii", "verify.projection_count",
}

COMMANDS = ("curvature", "expand-check", "leaf", "foliate", "verify-all", "moments")


def parse_config(path):
    """Flat `section.key = value` lines; values are JSON literals."""
    cfg = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            cfg[key] = json.loads(val)
        except json.JSONDecodeError:
            cfg[key] = val
    return cfg


def build_metric(cfg):
    family = cfg.get("metric.family", "flat")
    dim = int(cfg.get("metric.dim", 3))
    if dim - 1 not in (2, 3):
        raise ConfigError(f"metric.dim must be 3 or 4, got {dim}")
    if family == "flat":
        return manifold.MetricModel.flat(dim)
    if family == "space_form":
        return manifold.MetricModel.space_form(dim, float(cfg.get("metric.kappa", 1.0)))
    if family == "conformal_bump":
        Q = cfg.get("metric.Q")
        return manifold.MetricModel.conformal_bump(
            dim,
            epsilon=float(cfg.get("metric.epsilon", 0.1)),
            center=cfg.get("metric.center"),
            Q=np.asarray(Q, dtype=float) if Q is not None else None,
            skew=cfg.get("metric.skew"),
            radius=float(cfg.get("metric.radius", 2.0)))
    if family == "custom":
        poly = cfg.get("metric.poly")
        if poly is None:
            raise ConfigError("custom family needs metric.poly "
                              '(e.g. {"2,0,0": 0.1})')
        table = {}
        for key, coeff in poly.items():
            try:
                expt = tuple(int(t) for t in key.split(","))
            except ValueError as exc:
                raise ConfigError(f"bad exponent key {key!r}") from exc
            if len(expt) != dim:
                raise ConfigError(f"exponent key {key!r} has wrong length")
            table[expt] = float(coeff)
        return manifold.MetricModel.custom_conformal(
            dim, table, center=cfg.get("metric.center"),
            radius=float(cfg.get("metric.radius", 2.0)))
    raise ConfigError(f"unknown metric.family {family!r}")


def build_solver_config(cfg, n):
    kwargs = {}
    if "solver.k" in cfg:
        kwargs["k"] = int(cfg["solver.k"])
    if "solver.rho_list" in cfg:
        kwargs["rho_list"] = tuple(float(r) for r in cfg["solver.rho_list"])
    for name in ("tol_inner", "tol_outer", "damping"):
        if f"solver.{name}" in cfg:
            kwargs[name] = float(cfg[f"solver.{name}"])
    for name in ("max_inner", "max_outer"):
        if f"solver.{name}" in cfg:
            kwargs[name] = int(cfg[f"solver.{name}"])
    if "solver.seed_mode" in cfg:
        kwargs["seed_mode"] = cfg["solver.seed_mode"]
    if "solver.refine_center" in cfg:
        kwargs["refine_center"] = bool(cfg["solver.refine_center"])
    if "grid.L" in cfg:
        kwargs["grid_L"] = int(cfg["grid.L"])
    sc = solver.SolverConfig(**kwargs)
    try:
        sc.validate(n)
    except KcurvError as exc:
        raise ConfigError(str(exc)) from exc
    return sc


def _center(cfg, metric):
    c = cfg.get("solver.center")
    if c is not None:
        return np.asarray(c, dtype=float)
    return np.array(metric.params.get("center", np.zeros(metric.dim)), dtype=float)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def write_report(outdir, name, payload):
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / name
    path.write_text(json.dumps(payload, sort_keys=True, indent=2,
                               default=_json_default) + "\n")
    return path


def write_leaf_csv(outdir, leaf):
    outdir.mkdir(parents=True, exist_ok=True)
    grid = leaf.w.grid
    geom = leaf.geometry
    path = outdir / f"leaf_{leaf.rho:g}.csv"
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        header = (["node"]
                  + [f"theta{i}" for i in range(grid.m)]
                  + ["weight", "w"]
                  + [f"q{i}" for i in range(grid.m)]
                  + [f"kappa{i}" for i in range(grid.n)]
                  + [f"sigma{k}" for k in range(1, len(geom.sigma))])
        wr.writerow(header)
        for i in range(grid.num_nodes):
            row = ([i] + [repr(float(x)) for x in grid.nodes[i]]
                   + [repr(float(grid.weights[i])), repr(float(leaf.w.values[i]))]
                   + [repr(float(x)) for x in geom.positions[i]]
                   + [repr(float(x)) for x in geom.principal[i]]
                   + [repr(float(geom.sigma[k][i])) for k in range(1, len(geom.sigma))])
            wr.writerow(row)
    return path


def _fit_dict(fit):
    if fit is None:
        return None
    return {"exponent": fit.exponent, "coefficient": fit.coefficient,
            "fit_residual": fit.fit_residual,
            "samples": [[x, y] for x, y in fit.samples],
            "extra": fit.extra}


def _leaf_summary(leaf):
    geom = leaf.geometry
    s = geom.sigma[leaf.k]
    return {
        "rho": leaf.rho,
        "center": leaf.center.tolist(),
        "hk_target": leaf.hk_target,
        "sigma_min": float(np.min(s)),
        "sigma_max": float(np.max(s)),
        "sigma_mean": float(np.mean(s)),
        "sigma_rel_deviation": leaf.sigma_rel_deviation,
        "residual_sup": leaf.residual_sup,
        "kernel_norm": leaf.kernel_norm,
        "b_asymmetry": geom.b_asym,
        "inner_iterations": leaf.inner_iterations,
        "outer_iterations": leaf.outer_iterations,
        "w_sup": leaf.w.sup(),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_curvature(metric, cfg, sc, outdir, seed):
    p = _center(cfg, metric)
    c = manifold.curvature_at(metric, p)
    check = {"name": "curvature", "passed": max(c.residuals.values()) < 1e-5,
             "point": p.tolist(), "scalar": c.scalar,
             "scalar_grad": c.scalar_grad.tolist(),
             "ricci": c.ricci.tolist(), "frame": c.frame.tolist(),
             "riemann": c.riemann.tolist(), "residuals": c.residuals}
    return [check]


def cmd_expand_check(metric, cfg, sc, outdir, seed):
    p = _center(cfg, metric)
    radii = cfg.get("verify.radii")
    fit = verify.check_metric_expansion(metric, p, radii=radii)
    passed = fit.degenerate or fit.exponent >= 3.7
    return [{"name": "metric_expansion", "passed": bool(passed),
             "fit": _fit_dict(fit)}]


def cmd_moments(metric, cfg, sc, outdir, seed):
    out = []
    for n in (2, 3):
        rep = verify.sphere_moment_report(n)
        rep["name"] = f"moments_n{n}"
        out.append(rep)
    return out


def cmd_leaf(metric, cfg, sc, outdir, seed):
    grid = build_grid(metric.dim - 1,
                      sc.grid_L or solver.DEFAULT_BAND_LIMIT[metric.dim - 1])
    p0 = _center(cfg, metric)
    if sc.refine_center and metric.family not in ("flat", "space_form"):
        p0 = manifold.find_scalar_critical_point(metric, p0)
    rho = sc.rho_list[0]
    p, w, V, diag = solver.outer_solve_center(metric, p0, rho, sc, grid=grid)
    leaf = solver.Leaf(
        rho=rho, center=p, w=w, geometry=diag["geometry"], k=sc.k,
        hk_target=math.comb(grid.n, sc.k) * rho ** (-sc.k),
        residual_sup=diag["residual_sup"],
        kernel_norm=float(np.linalg.norm(diag["kernel_coeffs"])),
        inner_iterations=diag["iterations"],
        outer_iterations=diag.get("outer_iterations", 0))
    write_leaf_csv(outdir, leaf)
    summary = _leaf_summary(leaf)
    summary.update({"name": "leaf", "passed": leaf.residual_sup < sc.tol_inner,
                    "V": V.tolist()})
    return [summary]


def cmd_foliate(metric, cfg, sc, outdir, seed):
    grid = build_grid(metric.dim - 1,
                      sc.grid_L or solver.DEFAULT_BAND_LIMIT[metric.dim - 1])
    p0 = _center(cfg, metric)
    report = solver.foliate(metric, p0, sc, grid=grid)
    leaves_payload = []
    scal = manifold.curvature_at(metric, report.center0).scalar
    for leaf in report.leaves:
        write_leaf_csv(outdir, leaf)
        entry = _leaf_summary(leaf)
        vn, vnp = verify.volumes_of_leaf(metric, leaf)
        entry["vol_n"] = vn
        entry["vol_np1"] = vnp
        leaves_payload.append(entry)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "center0": report.center0.tolist(),
        "scalar_at_center": scal,
        "leaves": leaves_payload,
        "drift": report.drift,
        "drift_fit": _fit_dict(report.drift_fit),
        "center_speed_fit": _fit_dict(report.center_speed_fit),
        "drift_ratio_max": report.drift_ratio_max,
        "nesting_margin": report.nesting_margin,
        "radial_monotone": report.radial_monotone,
        "failure": report.failure,
    }
    write_report(outdir, "foliation.json", payload)
    passed = report.converged and bool(report.radial_monotone)
    return [{"name": "foliation", "passed": passed,
             "nesting_margin": report.nesting_margin,
             "drift_fit": _fit_dict(report.drift_fit),
             "failure": report.failure,
             "leaves": len(report.leaves)}]


def cmd_verify_all(metric, cfg, sc, outdir, seed):
    rng = np.random.default_rng(seed)
    n = metric.dim - 1
    grid = build_grid(n, sc.grid_L or solver.DEFAULT_BAND_LIMIT[n])
    p = _center(cfg, metric)
    checks = list(cmd_moments(metric, cfg, sc, outdir, seed))

    count = int(cfg.get("verify.projection_count", 5))
    errs = []
    for _ in range(count):
        T = verify.random_nabla_riemann(metric.dim, rng)
        errs.append(verify.check_projection_lemma(T, grid)["rel_error"])
    checks.append({"name": "projection_lemma", "passed": max(errs) < 1e-8,
                   "instances": count, "max_rel_error": max(errs)})

    nmat = 40
    worst = 0.0
    for _ in range(nmat):
        size = int(rng.integers(2, 7))
        A = rng.standard_normal((size, size))
        A = 0.5 * (A + A.T)
        lam = np.linalg.eigvalsh(A)
        for k in range(size + 1):
            brute = 0.0
            from itertools import combinations
            for idx in combinations(range(size), k):
                term = 1.0
                for i in idx:
                    term *= lam[i]
                brute += term
            worst = max(worst, float(abs(sigma_k(A, k) - brute)))
    checks.append({"name": "sigma_k_brute_force", "passed": worst < 1e-10,
                   "matrices": nmat, "max_abs_error": worst})

    fit = verify.check_metric_expansion(metric, p, radii=cfg.get("verify.radii"))
    checks.append({"name": "metric_expansion",
                   "passed": bool(fit.degenerate or fit.exponent >= 3.7),
                   "fit": _fit_dict(fit)})

    fit = verify.check_sigma_expansion(metric, p, sc.k, grid=grid)
    ok = fit.degenerate or (fit.exponent >= 1.9
                            and fit.extra.get("ric_coeff_rel_error", 0.0) < 0.05)
    checks.append({"name": "sigma_expansion", "passed": bool(ok),
                   "fit": _fit_dict(fit)})

    w = random_bandlimited(grid, 6, rng, zero_kernel=True)
    fit = verify.check_linearized_operator(metric, p, w, k=sc.k)
    flatlike = metric.family == "flat"
    ok = (fit.degenerate or fit.exponent >= 2.7 or
          (flatlike and max(y for _, y in fit.samples) < 1e-7))
    checks.append({"name": "linearized_operator", "passed": bool(ok),
                   "fit": _fit_dict(fit)})

    rho = sc.rho_list[len(sc.rho_list) // 2]
    par = verify.check_parity_cancellations(metric, p, rho, sc, grid=grid)
    par["name"] = "parity_cancellations"
    checks.append(par)
    return checks


DISPATCH = {
    "curvature": cmd_curvature,
    "expand-check": cmd_expand_check,
    "leaf": cmd_leaf,
    "foliate": cmd_foliate,
    "verify-all": cmd_verify_all,
    "moments": cmd_moments,
}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="kcurv", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None, help="key-value config file")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads (results are deterministic regardless)")
    ap.add_argument("--seed", type=int, default=None, help="random seed override")
    args = ap.parse_args(argv)

    try:
        cfg = parse_config(args.config) if args.config else {}
        metric = build_metric(cfg)
        sc = build_solver_config(cfg, metric.dim - 1)
    except (ConfigError, KcurvError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else int(cfg.get("run.seed", 1234))
    outdir = Path(args.out)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "metric": metric.describe(),
        "seed": seed,
        "threads": args.threads,
        "config": cfg,
    }
    try:
        checks = DISPATCH[args.command](metric, cfg, sc, outdir, seed)
    except KcurvError as exc:
        payload["error"] = {"type": type(exc).__name__, "message": str(exc)}
        payload["passed"] = False
        write_report(outdir, "report.json", payload)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    payload["checks"] = checks
    payload["passed"] = all(c.get("passed", False) for c in checks)
    path = write_report(outdir, "report.json", payload)
    status = "PASS" if payload["passed"] else "FAIL"
    print(f"{status} {args.command}: {sum(c.get('passed', False) for c in checks)}"
          f"/{len(checks)} checks passed -> {path}")
    return 0 if payload["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
