"""Numerical verification of the expansions and identities behind the solver.

Every asymptotic claim used by the construction is realized as a power-law
fit over a geometric radius sweep (FitResult), with thresholds set slightly
below the integer orders to absorb finite-sample log-log bias.  Coefficient
extractions use two-level Richardson elimination of the next-order term.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import solver as _solver
from .errors import ContractError
from .graphgeom import PerturbedSphere
from .manifold import curvature_at, exp_map_batch, log_map
from .sphere import (
    SphereField,
    build_grid,
    project_kernel,
    quad,
    sphere_volume,
    tangential_derivatives,
)

__all__ = [
    "FitResult",
    "fit_power",
    "check_metric_expansion",
    "check_sigma_expansion",
    "check_projection_lemma",
    "random_nabla_riemann",
    "leaf_volumes",
    "volume_coefficient_fit",
    "check_foliation",
    "check_parity_cancellations",
    "kernel_sweep_fit",
    "check_linearized_operator",
    "sphere_moment_report",
]

ZERO_FLOOR = 1e-13


@dataclass
class FitResult:
    """Least-squares power law y = coefficient * x^exponent on log-log axes."""

    exponent: float
    coefficient: float
    samples: list
    fit_residual: float          # max |fit - y| / min |y|
    extra: dict = field(default_factory=dict)

    @property
    def degenerate(self):
        return not math.isfinite(self.exponent)


def fit_power(xs, ys):
    xs = [float(x) for x in xs]
    ys = [abs(float(y)) for y in ys]
    samples = list(zip(xs, ys))
    if max(ys) < ZERO_FLOOR:
        # identically-zero data: any order is consistent
        return FitResult(exponent=math.inf, coefficient=0.0, samples=samples,
                         fit_residual=0.0)
    lx = np.log(xs)
    ly = np.log(np.maximum(ys, 1e-300))
    A = np.stack([np.ones_like(lx), lx], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, ly, rcond=None)
    fit = np.exp(a + b * lx)
    resid = float(np.max(np.abs(fit - ys)) / max(min(ys), 1e-300))
    return FitResult(exponent=float(b), coefficient=float(math.exp(a)),
                     samples=samples, fit_residual=resid)


def _default_radii():
    return [0.2, 0.2 / math.sqrt(2), 0.1, 0.1 / math.sqrt(2), 0.05]


def _direction_sample(m, count=16):
    grid = build_grid(m - 1, max(8, 10))
    idx = np.unique(np.linspace(0, grid.num_nodes - 1, count).astype(int))
    return grid.nodes[idx]


def _pullback_metric(metric, curv, Y):
    """Exact metric in frame-normal coordinates at the points Y (B, m)."""
    v0 = Y @ curv.frame.T
    q, Jv = exp_map_batch(metric, curv.point, v0, want_jacobian=True)
    XN = Jv @ curv.frame
    gq = metric.g(q)
    return np.einsum("nca,ncd,ndb->nab", XN, gq, XN), q


def _metric_taylor_terms(curv, Y):
    """Second- and third-order normal-coordinate Taylor terms from curvature."""
    S = curv.riemann
    nS = curv.riemann_grad
    # (1/3) <R(E_k, E_a) E_l, E_b> y_k y_l  with <R(.,.)...> = S[k,a,b,l]
    T2 = np.einsum("kabl,nk,nl->nab", S, Y, Y) / 3.0
    # (1/6) <grad_k R(E_l, E_a) E_m, E_b> y_k y_l y_m = (1/6) nS[k,l,a,b,m] ...
    T3 = np.einsum("klabm,nk,nl,nm->nab", nS, Y, Y, Y) / 6.0
    return T2, T3


def check_metric_expansion(metric, p, directions=None, radii=None):
    """Remainder order of the normal-coordinate metric Taylor expansion.

    Subtracts the curvature-built quadratic and cubic terms from the exact
    pulled-back metric along rays and fits the remainder exponent (pass
    threshold is >= 3.7).  `extra` carries a Richardson estimate of the
    quadratic coefficient against its curvature pattern.
    """
    curv = curvature_at(metric, p)
    m = metric.dim
    if directions is None:
        directions = _direction_sample(m)
    directions = np.asarray(directions, dtype=float)
    if radii is None:
        radii = _default_radii()
    eye = np.eye(m)

    sups = []
    A_small = {}
    for t in radii + [radii[-1] / 2.0]:
        Y = t * directions
        gN, _ = _pullback_metric(metric, curv, Y)
        T2, T3 = _metric_taylor_terms(curv, Y)
        rem = gN - eye - T2 - T3
        if t in radii:
            sups.append(float(np.max(np.abs(rem))))
        A_small[t] = gN - eye - T3  # quadratic part plus O(t^4)
    fit = fit_power(radii, sups)

    t1 = radii[-1]
    t2 = radii[-1] / 2.0
    X1 = A_small[t1] / t1 ** 2
    X2 = A_small[t2] / t2 ** 2
    c2 = (4.0 * X2 - X1) / 3.0          # eliminates the t^2 correction
    T2_unit, _ = _metric_taylor_terms(curv, directions)
    fit.extra["quadratic_coeff_error"] = float(np.max(np.abs(c2 - T2_unit)))
    fit.extra["quadratic_coeff_scale"] = float(np.max(np.abs(T2_unit)))
    return fit


def check_sigma_expansion(metric, p, k, radii=None, grid=None):
    """Order and coefficients of rho^k sigma_k on geodesic spheres.

    Fits sup |rho^k sigma_k - C(n,k)| (threshold >= 1.9), Richardson-extracts
    the rho^2 coefficient field against -C(n-1,k-1) Ric(Theta,Theta)/3, and
    least-squares fits the rho^3 coefficient against
    -C(n-1,k-1) (grad_Theta Ric)(Theta,Theta)/4.
    """
    if grid is None:
        grid = build_grid(metric.dim - 1, _solver.DEFAULT_BAND_LIMIT[metric.dim - 1])
    if radii is None:
        radii = _default_radii()
    n = grid.n
    cnk = math.comb(n, k)
    cprev = math.comb(n - 1, k - 1)
    curv = curvature_at(metric, p)
    zero = SphereField(grid, np.zeros(grid.num_nodes))

    D = {}
    for rho in radii:
        ps = PerturbedSphere(metric, p, rho, zero, curv=curv)
        geom = ps.geometry(kmax=k)
        D[rho] = rho ** k * geom.sigma[k] - cnk
    fit = fit_power(radii, [float(np.max(np.abs(D[r]))) for r in radii])

    # rho^2 coefficient by two-point elimination of the rho^3 term
    r1, r2 = radii[-2], radii[-1]
    X1, X2 = D[r1] / r1 ** 2, D[r2] / r2 ** 2
    c2 = (r1 * X2 - r2 * X1) / (r1 - r2)
    target2 = -cprev * curv.ric_quadratic(grid.nodes) / 3.0
    scale2 = max(float(np.max(np.abs(target2))), ZERO_FLOOR)
    fit.extra["ric_coeff_rel_error"] = float(np.max(np.abs(c2 - target2))) / scale2
    fit.extra["ric_coeff_scale"] = scale2

    # pointwise LSQ for (c2, c3, c4); records the grad-Ric coefficient
    A = np.stack([[r ** 2, r ** 3, r ** 4] for r in radii])
    rhs = np.stack([D[r] for r in radii])            # (nr, N)
    coef, *_ = np.linalg.lstsq(A, rhs, rcond=None)   # (3, N)
    target3 = -cprev * curv.grad_ric_cubic(grid.nodes) / 4.0
    scale3 = float(np.max(np.abs(target3)))
    fit.extra["grad_ric_coeff_scale"] = scale3
    if scale3 > ZERO_FLOOR:
        fit.extra["grad_ric_coeff_rel_error"] = \
            float(np.max(np.abs(coef[1] - target3))) / scale3
        num = float(coef[1] @ target3)
        den = float(target3 @ target3)
        fit.extra["grad_ric_coeff_ratio"] = num / den
    return fit


# ---------------------------------------------------------------------------
# projection lemma


def _riemann_symmetrize(T):
    T = 0.5 * (T - T.transpose(0, 2, 1, 3, 4))
    T = 0.5 * (T - T.transpose(0, 1, 2, 4, 3))
    T = 0.5 * (T + T.transpose(0, 3, 4, 1, 2))
    # first Bianchi, cyclic in the last three slots
    B1 = (T + T.transpose(0, 1, 3, 4, 2) + T.transpose(0, 1, 4, 2, 3)) / 3.0
    T = T - B1
    # second Bianchi, cyclic in (derivative, third, fourth) slots
    B2 = (T + T.transpose(3, 1, 2, 4, 0) + T.transpose(4, 1, 2, 0, 3)) / 3.0
    return T - B2


def nabla_riemann_residuals(T):
    out = {
        "antisym_first": float(np.max(np.abs(T + T.transpose(0, 2, 1, 3, 4)))),
        "antisym_last": float(np.max(np.abs(T + T.transpose(0, 1, 2, 4, 3)))),
        "pair_symmetry": float(np.max(np.abs(T - T.transpose(0, 3, 4, 1, 2)))),
        "bianchi_first": float(np.max(np.abs(
            T + T.transpose(0, 1, 3, 4, 2) + T.transpose(0, 1, 4, 2, 3)))),
        "bianchi_second": float(np.max(np.abs(
            T + T.transpose(3, 1, 2, 4, 0) + T.transpose(4, 1, 2, 0, 3)))),
    }
    scale = max(1.0, float(np.max(np.abs(T))))
    return {k: v / scale for k, v in out.items()}


def random_nabla_riemann(m, rng, iters=200):
    """Random 5-tensor with all grad-Riemann symmetries to machine precision."""
    T = rng.standard_normal((m,) * 5)
    for _ in range(iters):
        T = _riemann_symmetrize(T)
    if max(nabla_riemann_residuals(T).values()) > 1e-12:
        raise ContractError("symmetry projection failed to converge")
    nrm = float(np.max(np.abs(T)))
    return T / nrm if nrm > 0 else T


def check_projection_lemma(T, grid, tol=1e-8):
    """Kernel projection of Theta -> (grad_Theta Ric)(Theta, Theta) vs the
    Bianchi/moment closed form 2/(n+3) * grad(scal)."""
    res = nabla_riemann_residuals(T)
    if max(res["bianchi_second"], res["bianchi_first"]) > 1e-10:
        raise ContractError(f"input tensor violates Bianchi: {res}")
    n = grid.n
    if T.shape[0] != grid.m:
        raise ContractError("tensor dimension does not match grid")
    dric = np.einsum("akbkc->abc", T)
    f = np.einsum("na,nb,nc,abc->n", grid.nodes, grid.nodes, grid.nodes, dric)
    c, _ = project_kernel(SphereField(grid, f))
    dscal = np.einsum("aii->a", dric)
    closed = 2.0 / (n + 3) * dscal
    scale = max(float(np.max(np.abs(closed))), ZERO_FLOOR)
    err = float(np.max(np.abs(c - closed))) / scale
    return {"rel_error": err, "passed": err < tol, "quadrature": c.tolist(),
            "closed_form": closed.tolist()}


# ---------------------------------------------------------------------------
# volumes


def leaf_volumes(metric, p, rho, w, curv=None, geom=None, radial_points=24):
    """n-volume of the leaf and (n+1)-volume of the region it bounds."""
    grid = w.grid
    if curv is None:
        curv = curvature_at(metric, p)
    if geom is None:
        ps = PerturbedSphere(metric, p, rho, w, curv=curv)
        geom = ps.geometry(kmax=1)
    vol_n = float(quad(SphereField(grid, np.sqrt(np.linalg.det(geom.first)))))

    x, wx = np.polynomial.legendre.leggauss(radial_points)
    R = rho * (1.0 - w.values)                      # (N,)
    r = R[:, None] * (x[None, :] + 1.0) / 2.0       # (N, nr)
    wr = R[:, None] / 2.0 * wx[None, :]
    Y = r[:, :, None] * grid.nodes[:, None, :]      # (N, nr, m)
    flatY = Y.reshape(-1, grid.m)
    gN, _ = _pullback_metric(metric, curv, flatY)
    dets = np.sqrt(np.linalg.det(gN)).reshape(r.shape)
    integrand = (r ** grid.n) * dets
    vol_np1 = float(np.sum(grid.weights[:, None] * wr * integrand))
    return vol_n, vol_np1


def volumes_of_leaf(metric, leaf):
    return leaf_volumes(metric, leaf.center, leaf.rho, leaf.w, geom=leaf.geometry)


def volume_coefficient_fit(metric, leaves, scal_at_p0):
    """rho^2 coefficients of both volume expansions from a leaf sweep.

    Returns relative errors against -scal/(2(n+1)) for the leaf volume and
    -(n+2) scal/(2n(n+3)) for the enclosed volume.
    """
    if len(leaves) < 2:
        raise ContractError("need at least two leaves")
    n = leaves[0].w.grid.n
    voln_ratio = {}
    volnp_ratio = {}
    for leaf in leaves:
        vn, vnp = volumes_of_leaf(metric, leaf)
        voln_ratio[leaf.rho] = vn / (leaf.rho ** n * sphere_volume(n))
        volnp_ratio[leaf.rho] = vnp / (leaf.rho ** (n + 1) * sphere_volume(n) / (n + 1))
    rhos = sorted(voln_ratio, reverse=True)
    r1, r2 = rhos[-2], rhos[-1]

    def richardson_c2(vals):
        X1 = (vals[r1] - 1.0) / r1 ** 2
        X2 = (vals[r2] - 1.0) / r2 ** 2
        return (r1 ** 2 * X2 - r2 ** 2 * X1) / (r1 ** 2 - r2 ** 2)

    c2_n = richardson_c2(voln_ratio)
    c2_np = richardson_c2(volnp_ratio)
    tgt_n = -scal_at_p0 / (2.0 * (n + 1))
    tgt_np = -(n + 2) * scal_at_p0 / (2.0 * n * (n + 3))
    return {
        "voln_coeff": float(c2_n), "voln_target": float(tgt_n),
        "voln_rel_error": abs(c2_n - tgt_n) / max(abs(tgt_n), ZERO_FLOOR),
        "volnp_coeff": float(c2_np), "volnp_target": float(tgt_np),
        "volnp_rel_error": abs(c2_np - tgt_np) / max(abs(tgt_np), ZERO_FLOOR),
        "samples_n": {str(r): voln_ratio[r] for r in rhos},
        "samples_np1": {str(r): volnp_ratio[r] for r in rhos},
    }


# ---------------------------------------------------------------------------
# foliation nesting


def check_foliation(metric, report):
    """Strict radial monotonicity of the rho-sweep about the finest center.

    Returns (margin, monotone): the minimal radial gap over directions and
    consecutive leaves, in the geodesic radial coordinate about the center
    of the smallest leaf.
    """
    leaves = report.leaves
    if len(leaves) < 3:
        raise ContractError("need >= 3 consecutive converged leaves")
    pstar = leaves[-1].center
    g0 = metric.g(pstar)
    radial = []
    for leaf in leaves:
        v = log_map(metric, pstar, leaf.geometry.positions)
        radial.append(np.sqrt(np.einsum("bi,ij,bj->b", v, g0, v)))
    margin = math.inf
    for ra, rb in zip(radial, radial[1:]):
        margin = min(margin, float(np.min(ra - rb)))
    return margin, margin > 0.0


# ---------------------------------------------------------------------------
# parity cancellations and the kernel-residual sweep


def check_parity_cancellations(metric, p, rho, cfg, grid=None):
    """Kernel projection of the even part of the residual (machine-zero by
    the antipodal grid symmetry) plus the raw kernel size for reference."""
    if grid is None:
        grid = build_grid(metric.dim - 1, _solver.DEFAULT_BAND_LIMIT[metric.dim - 1])
    w, diag = _solver.inner_fixed_point(metric, p, rho, cfg, grid=grid)
    F = diag["residual_field"]
    even = SphereField(grid, 0.5 * (F.values + F.values[grid.antipode]))
    c_even, _ = project_kernel(even)
    bound = max(1e-3 * rho ** 5, 1e-12)
    return {
        "even_kernel_norm": float(np.linalg.norm(c_even)),
        "bound": bound,
        "passed": float(np.linalg.norm(c_even)) <= bound,
        "kernel_norm": float(np.linalg.norm(diag["kernel_coeffs"])),
    }


def kernel_sweep_fit(metric, p0, cfg, rhos=None, grid=None):
    """Power-law fit of |V_{p0}| over a rho sweep (target exponent >= 1.8)."""
    if grid is None:
        grid = build_grid(metric.dim - 1, _solver.DEFAULT_BAND_LIMIT[metric.dim - 1])
    if rhos is None:
        rhos = list(cfg.rho_list)
    vals = []
    w = None
    for rho in rhos:
        V, w, _ = _solver.kernel_residual(metric, p0, rho, cfg, grid=grid, w_start=w)
        vals.append(float(np.linalg.norm(V)))
        w = SphereField(grid, w.values)  # reuse as warm start
    return fit_power(rhos, vals)


# ---------------------------------------------------------------------------
# linearized operator


def curvature_correction_operator(curv, w):
    """The rho^2 correction L to the linearized operator, assembled from
    curvature data and tangential derivatives:
    L w = (Ric(T,T) w + 2 Ric(e_i,T) w_i - <R(T,e_i)T,e_j> w_ij) / 3."""
    grid = w.grid
    gradw, hessw = tangential_derivatives(w)
    ric_tt = curv.ric_quadratic(grid.nodes)
    ric_it = np.einsum("ab,nia,nb->ni", curv.ricci, grid.frames, grid.nodes)
    # <R(Theta, e_i) Theta, e_j> = S[Theta, e_i, e_j, Theta]
    s4 = np.einsum("abcd,na,nib,njc,nd->nij", curv.riemann, grid.nodes,
                   grid.frames, grid.frames, grid.nodes)
    vals = (ric_tt * w.values
            + 2.0 * np.einsum("ni,ni->n", ric_it, gradw.values)
            - np.einsum("nij,nij->n", s4, hessw.values)) / 3.0
    return SphereField(grid, vals)


def check_linearized_operator(metric, p, w, rho_list=None, k=1, fd_scale=1e-5):
    """Directional derivative of the exact residual at w = 0 versus
    (Delta + n) + rho^2 L; the remainder should fit an exponent >= 2.7."""
    from .sphere import laplace_beltrami

    grid = w.grid
    curv = curvature_at(metric, p)
    if rho_list is None:
        rho_list = [0.2, 0.15, 0.1, 0.07, 0.05]
    lin0 = laplace_beltrami(w).values + grid.n * w.values
    lcorr = curvature_correction_operator(curv, w).values
    t = fd_scale / max(w.sup(), 1e-30)
    rem = []
    for rho in rho_list:
        fp = _solver.residual(metric, p, rho, SphereField(grid, t * w.values), k,
                              curv=curv)
        fm = _solver.residual(metric, p, rho, SphereField(grid, -t * w.values), k,
                              curv=curv)
        deriv = (fp.values - fm.values) / (2.0 * t)
        rem.append(float(np.max(np.abs(deriv - lin0 - rho ** 2 * lcorr))))
    fit = fit_power(rho_list, rem)
    fit.extra["linear_term_sup"] = float(np.max(np.abs(lin0)))
    return fit


# ---------------------------------------------------------------------------
# sphere moment identities (quadrature-level oracle)


def sphere_moment_report(n, L=None, tol=1e-10):
    grid = build_grid(n, L if L is not None else _solver.DEFAULT_BAND_LIMIT[n])
    x1 = grid.nodes[:, 0]
    x2 = grid.nodes[:, 1]
    m2 = float(quad(SphereField(grid, x1 ** 2)))
    m4 = float(quad(SphereField(grid, x1 ** 4)))
    m22 = float(quad(SphereField(grid, x1 ** 2 * x2 ** 2)))
    vol = sphere_volume(n)
    checks = {
        "total_weight": abs(float(np.sum(grid.weights)) - vol) / vol,
        "x1sq": abs(m2 - vol / (n + 1)) / (vol / (n + 1)),
        "x1_4_eq_3_x1x2": abs(m4 - 3.0 * m22) / m4,
        "x1_4_eq_ratio": abs(m4 - 3.0 / (n + 3) * m2) / m4,
    }
    return {"n": n, "residuals": checks,
            "passed": max(checks.values()) < tol,
            "moments": {"x1^2": m2, "x1^4": m4, "x1^2 x2^2": m22}}
