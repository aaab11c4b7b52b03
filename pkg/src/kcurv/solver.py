"""Two-tier solver for constant k-curvature leaves and the foliation sweep.

Inner tier: at fixed (p, rho), iterate

    w  <-  w - damping * (Delta + n)^{-1} Piperp F(w),
    F(w) = (rho^k sigma_k(S_rho(p, w)) - C(n,k)) / C(n-1,k-1),

starting from the curvature expansion seed rho^2 w0 + rho^3 w1.  The exact
nonlinear residual is used; its linearization at the round sphere is
(Delta + n) up to O(rho^2), which makes the map a contraction for small rho.

Outer tier: move the center p by damped Newton (finite-difference Jacobian)
until the kernel component of the residual vanishes; this is the projected
equation tying p to the gradient of the ambient scalar curvature.  A pattern
search over the 2 rho^2 ball backs up the Newton iteration.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, GraphConditionError, NonConvergenceError, OuterSolveError
from .graphgeom import PerturbedSphere
from .manifold import curvature_at, find_scalar_critical_point
from .sphere import (
    SphereField,
    build_grid,
    project_kernel,
    solve_helmholtz,
)

__all__ = [
    "SolverConfig",
    "Leaf",
    "FoliationReport",
    "DEFAULT_BAND_LIMIT",
    "seed_w",
    "residual",
    "inner_fixed_point",
    "kernel_residual",
    "outer_solve_center",
    "foliate",
]

# Band limits tuned so the harmonic-basis evaluation noise in sigma_k stays
# below tol_inner (higher L degrades pointwise accuracy of the degree-L
# monomial representation faster than it buys resolution for these
# analytic, rho^2-small fields).
DEFAULT_BAND_LIMIT = {2: 14, 3: 12}

DAMPING_FLOOR = 1.0 / 16.0


@dataclass
class SolverConfig:
    """Tolerances and schedules for the leaf and foliation solves."""

    k: int = 1
    tol_inner: float = 1e-10
    tol_outer: float = 1e-6
    max_inner: int = 50
    max_outer: int = 30
    damping: float = 1.0
    rho_list: tuple = (0.2, 0.16, 0.128, 0.1024, 0.08192)
    seed_mode: str = "expansion"     # "expansion" | "zero"
    grid_L: int = None               # default per DEFAULT_BAND_LIMIT
    newton_fd_scale: float = 1e-3    # outer FD step = scale * rho^2
    outer_ball_factor: float = 2.0   # fallback search ball: factor * rho^2
    refine_center: bool = True
    steps: int = None                # geodesic integrator steps override

    def validate(self, n):
        if not 1 <= self.k <= n:
            raise ContractError(f"k={self.k} outside 1..{n}")
        if self.k == n:
            warnings.warn("k = n (Gauss-Kronecker case): accepted, see notes",
                          stacklevel=2)
        if self.tol_inner <= 0 or self.tol_outer <= 0:
            raise ContractError("tolerances must be positive")
        if not 0 < self.damping <= 1:
            raise ContractError("damping must lie in (0, 1]")
        if self.seed_mode not in ("expansion", "zero"):
            raise ContractError(f"unknown seed_mode {self.seed_mode!r}")
        rl = list(self.rho_list)
        if any(r <= 0 for r in rl) or any(a <= b for a, b in zip(rl, rl[1:])):
            raise ContractError("rho_list must be positive and strictly decreasing")


@dataclass(eq=False)
class Leaf:
    """One converged constant k-curvature hypersurface."""

    rho: float
    center: np.ndarray
    w: SphereField
    geometry: object
    k: int
    hk_target: float            # C(n,k) rho^{-k}
    residual_sup: float         # sup |Piperp F| at convergence
    kernel_norm: float          # |Pi F| coefficient norm (unrescaled)
    inner_iterations: int
    outer_iterations: int = 0
    contraction_ratios: list = field(default_factory=list)

    @property
    def sigma_rel_deviation(self):
        n = self.w.grid.n
        s = self.geometry.sigma[self.k]
        return float(np.max(np.abs(s - self.hk_target)) / self.hk_target)


@dataclass(eq=False)
class FoliationReport:
    """rho-sweep of leaves plus nesting and smoothness diagnostics."""

    leaves: list
    center0: np.ndarray
    drift: list                  # |p_rho - p0| per leaf
    drift_fit: dict = None       # power-law fit of drift vs rho
    nesting_margin: float = None
    radial_monotone: bool = None
    drift_ratio_max: float = None   # max |dp| / (drho * max rho)
    center_speed_fit: dict = None   # |dp/drho| vs rho power fit
    failure: str = None

    @property
    def converged(self):
        return self.failure is None


def _default_grid(metric, cfg):
    n = metric.dim - 1
    L = cfg.grid_L if cfg.grid_L is not None else DEFAULT_BAND_LIMIT.get(n)
    if L is None:
        raise ContractError(f"no default band limit for n={n}")
    return build_grid(n, L)


def seed_w(curv, rho, grid):
    """Curvature expansion seed rho^2 w0 + rho^3 w1.

    (Delta + n) w0 = (1/3) Ric(Theta, Theta); the kernel part of the right
    side vanishes by parity.  (Delta + n) w1 = (1/4) Piperp of the cubic
    field (grad_Theta Ric)(Theta, Theta).
    """
    ric = curv.ric_quadratic(grid.nodes)
    _, f0 = project_kernel(SphereField(grid, ric / 3.0))
    w0 = solve_helmholtz(f0)
    dric = curv.grad_ric_cubic(grid.nodes)
    _, f1 = project_kernel(SphereField(grid, dric / 4.0))
    w1 = solve_helmholtz(f1)
    return SphereField(grid, rho ** 2 * w0.values + rho ** 3 * w1.values)


def _zero_kernel(w):
    _, perp = project_kernel(w)
    return perp


def residual(metric, p, rho, w, k, curv=None, steps=None):
    """Normalized constant-curvature defect of S_rho(p, w) as a SphereField.

    F = (rho^k sigma_k - C(n,k)) / C(n-1,k-1); F = 0 iff H_k = C(n,k) rho^{-k}.
    """
    f, _ = _residual_geom(metric, p, rho, w, k, curv=curv, steps=steps)
    return f


def _residual_geom(metric, p, rho, w, k, curv=None, steps=None):
    grid = w.grid
    n = grid.n
    ps = PerturbedSphere(metric, p, rho, w, curv=curv, steps=steps)
    geom = ps.geometry(kmax=max(k, 1))
    cnk = math.comb(n, k)
    cprev = math.comb(n - 1, k - 1)
    vals = (rho ** k * geom.sigma[k] - cnk) / cprev
    return SphereField(grid, vals), geom


def inner_fixed_point(metric, p, rho, cfg, grid=None, w_start=None, curv=None):
    """Solve the kernel-orthogonal part: w with Piperp F(w) = 0 at fixed (p, rho).

    Returns (w, diagnostics); diagnostics carry the residual history, the
    final residual field and geometry for reuse.
    """
    if grid is None:
        grid = _default_grid(metric, cfg)
    cfg.validate(grid.n)
    if curv is None:
        curv = curvature_at(metric, p)
    if w_start is not None:
        w = _zero_kernel(w_start)
    elif cfg.seed_mode == "expansion":
        w = seed_w(curv, rho, grid)
    else:
        w = SphereField(grid, np.zeros(grid.num_nodes))

    damping = cfg.damping
    history = []
    ratios = []
    prev = math.inf
    for it in range(cfg.max_inner):
        F, geom = _residual_geom(metric, p, rho, w, cfg.k, curv=curv, steps=cfg.steps)
        kc, Fperp = project_kernel(F)
        res = Fperp.sup()
        history.append(res)
        if history and len(history) > 1 and prev > 0:
            ratios.append(res / prev)
        if res < cfg.tol_inner:
            diag = {
                "iterations": it,
                "history": history,
                "contraction_ratios": ratios,
                "residual_field": F,
                "residual_sup": res,
                "kernel_coeffs": kc,
                "geometry": geom,
                "curvature": curv,
                "damping": damping,
            }
            return w, diag
        if res >= prev:
            damping *= 0.5
            if damping < DAMPING_FLOOR:
                raise NonConvergenceError(
                    f"inner iteration stalled at residual {res:.3e} "
                    f"(tol {cfg.tol_inner:.1e})", history=history)
        prev = res
        update = solve_helmholtz(Fperp)
        while True:
            try:
                w_new = _zero_kernel(SphereField(grid, w.values - damping * update.values))
                # validity is checked by the residual evaluation next loop;
                # the graph condition is checked on construction
                PerturbedSphere(metric, p, rho, w_new, curv=curv)
                break
            except GraphConditionError:
                damping *= 0.5
                if damping < DAMPING_FLOOR:
                    raise NonConvergenceError(
                        "graph condition breached persistently", history=history)
        w = w_new
    raise NonConvergenceError(
        f"inner iteration exceeded max_inner={cfg.max_inner} "
        f"(last residual {history[-1]:.3e})", history=history)


def _kernel_vector(n, rho, kernel_coeffs):
    return 4.0 * (n + 3) / rho ** 3 * np.asarray(kernel_coeffs)


def kernel_residual(metric, p, rho, cfg, grid=None, w_start=None, curv=None):
    """Kernel component of the residual at the converged w, in the paper's
    4(n+3)/rho^3 normalization.  Returns (V, w, diagnostics)."""
    if grid is None:
        grid = _default_grid(metric, cfg)
    w, diag = inner_fixed_point(metric, p, rho, cfg, grid=grid, w_start=w_start,
                                curv=curv)
    V = _kernel_vector(grid.n, rho, diag["kernel_coeffs"])
    return V, w, diag


def outer_solve_center(metric, p_guess, rho, cfg, grid=None, w_start=None):
    """Damped Newton on p -> V(p) with finite-difference Jacobian.

    Falls back to a shrinking pattern search over the 2 rho^2 chart ball on
    stagnation.  Returns (p, w, V, diagnostics).
    """
    if grid is None:
        grid = _default_grid(metric, cfg)
    m = metric.dim
    p = np.asarray(p_guess, dtype=float).copy()

    V, w, diag = kernel_residual(metric, p, rho, cfg, grid=grid, w_start=w_start)
    vnorm = float(np.linalg.norm(V))
    samples = [(p.copy(), vnorm)]
    if vnorm < cfg.tol_outer:
        diag["outer_iterations"] = 0
        return p, w, V, diag

    h = cfg.newton_fd_scale * rho ** 2
    J = None
    damping = 1.0
    stale = 0
    for it in range(1, cfg.max_outer + 1):
        if J is None:
            J = np.empty((m, m))
            for d in range(m):
                e = np.zeros(m)
                e[d] = h
                Vd, _, _ = kernel_residual(metric, p + e, rho, cfg, grid=grid,
                                           w_start=w)
                J[:, d] = (Vd - V) / h
        try:
            step = np.linalg.solve(J, V)
        except np.linalg.LinAlgError:
            step = None
        improved = False
        if step is not None:
            lam = damping
            while lam >= DAMPING_FLOOR:
                p_try = p - lam * step
                try:
                    Vt, wt, diagt = kernel_residual(metric, p_try, rho, cfg,
                                                    grid=grid, w_start=w)
                except NonConvergenceError:
                    lam *= 0.5
                    continue
                vt = float(np.linalg.norm(Vt))
                samples.append((p_try.copy(), vt))
                if vt < vnorm:
                    p, V, w, diag, vnorm = p_try, Vt, wt, diagt, vt
                    improved = True
                    break
                lam *= 0.5
        if vnorm < cfg.tol_outer:
            diag["outer_iterations"] = it
            diag["outer_samples"] = samples
            return p, w, V, diag
        if improved:
            stale = 0
            J = None if it % 4 == 0 else J   # periodic refresh
        else:
            stale += 1
            J = None
            if stale >= 2:
                break

    # pattern search over the chart ball of radius outer_ball_factor * rho^2
    delta = cfg.outer_ball_factor * rho ** 2
    budget = 12 * m
    while budget > 0 and delta > 1e-6 * rho ** 2:
        moved = False
        for d in range(m):
            for sgn in (1.0, -1.0):
                e = np.zeros(m)
                e[d] = sgn * delta
                try:
                    Vt, wt, diagt = kernel_residual(metric, p + e, rho, cfg,
                                                    grid=grid, w_start=w)
                except NonConvergenceError:
                    continue
                vt = float(np.linalg.norm(Vt))
                samples.append((p + e, vt))
                budget -= 1
                if vt < vnorm:
                    p, V, w, diag, vnorm = p + e, Vt, wt, diagt, vt
                    moved = True
                if vnorm < cfg.tol_outer:
                    diag["outer_iterations"] = cfg.max_outer
                    diag["outer_samples"] = samples
                    return p, w, V, diag
        if not moved:
            delta *= 0.5
    raise OuterSolveError(
        f"no kernel-residual zero found near {p_guess} at rho={rho} "
        f"(best |V| = {vnorm:.3e})",
        samples=[(pt.tolist(), float(v)) for pt, v in samples])


def foliate(metric, p0, cfg, grid=None):
    """Sweep rho_list, warm-starting each leaf, and assemble the report."""
    from .verify import check_foliation, fit_power  # late import, no cycle

    if grid is None:
        grid = _default_grid(metric, cfg)
    cfg.validate(grid.n)
    n = grid.n
    p0 = np.asarray(p0, dtype=float)
    if cfg.refine_center and metric.family not in ("flat", "space_form"):
        p0 = find_scalar_critical_point(metric, p0)

    leaves = []
    p = p0.copy()
    w = None
    failure = None
    for rho in cfg.rho_list:
        if w is not None:
            scale = (rho / leaves[-1].rho) ** 2
            w = SphereField(grid, w.values * scale)
        try:
            p, w, V, diag = outer_solve_center(metric, p, rho, cfg, grid=grid,
                                               w_start=w)
        except (NonConvergenceError, OuterSolveError) as exc:
            failure = f"rho={rho}: {exc}"
            break
        leaf = Leaf(
            rho=rho, center=p.copy(), w=w, geometry=diag["geometry"], k=cfg.k,
            hk_target=math.comb(n, cfg.k) * rho ** (-cfg.k),
            residual_sup=diag["residual_sup"],
            kernel_norm=float(np.linalg.norm(diag["kernel_coeffs"])),
            inner_iterations=diag["iterations"],
            outer_iterations=diag.get("outer_iterations", 0),
            contraction_ratios=diag["contraction_ratios"],
        )
        leaves.append(leaf)

    drift = [float(np.linalg.norm(leaf.center - p0)) for leaf in leaves]
    report = FoliationReport(leaves=leaves, center0=p0, drift=drift,
                             failure=failure)
    if len(leaves) >= 2:
        rhos = [leaf.rho for leaf in leaves]
        if max(drift) > 1e-13:
            report.drift_fit = fit_power(rhos, drift)
        dp = [float(np.linalg.norm(a.center - b.center))
              for a, b in zip(leaves, leaves[1:])]
        drho = [a.rho - b.rho for a, b in zip(leaves, leaves[1:])]
        maxrho = max(rhos)
        report.drift_ratio_max = max(
            (d / (dr * maxrho) for d, dr in zip(dp, drho)), default=0.0)
        speeds = [d / dr for d, dr in zip(dp, drho)]
        mids = [0.5 * (a.rho + b.rho) for a, b in zip(leaves, leaves[1:])]
        if max(speeds, default=0.0) > 1e-12:
            report.center_speed_fit = fit_power(mids, speeds)
    if len(leaves) >= 3 and failure is None:
        margin, monotone = check_foliation(metric, report)
        report.nesting_margin = margin
        report.radial_monotone = monotone
    return report
