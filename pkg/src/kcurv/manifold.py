"""Ambient metrics in a chart: curvature data and the exponential map.

All built-in families are conformally flat, g = e^{2u} delta, which gives
closed-form Christoffel symbols and derivative stacks up to third order:

    Gamma^k_ij = u_i d_jk + u_j d_ik - u_k d_ij.

Arbitrary metrics are supported through a callable evaluator with a nested
central-difference derivative oracle.

Curvature conventions.  The stored Riemann array uses

    R[i,j,k,l] = < R(E_i, E_j) E_l , E_k >,   R(X,Y) = [grad_X, grad_Y] - grad_[X,Y]

so that a space form of curvature kappa has R[i,j,k,l] =
kappa (d_ik d_jl - d_il d_jk), Ric_ij = sum_k R[k,i,k,j] is positive on
spheres, and the inner product pairing used in the normal-coordinate metric
expansion is <R(E_k,E_i)E_l,E_j> = -R[k,i,l,j].
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AccuracyError,
    CapabilityError,
    ContractError,
    DegenerateMetricError,
    NonConvergenceError,
    OutOfDomainError,
)

__all__ = [
    "MetricModel",
    "CurvatureAtPoint",
    "christoffels",
    "curvature_at",
    "exp_map",
    "exp_map_batch",
    "log_map",
    "geodesic_distance",
    "find_scalar_critical_point",
    "scalar_curvature",
    "default_steps",
]


# ---------------------------------------------------------------------------
# conformal factor derivative stacks (u, u_i, u_ij, u_ijk), batched over points


def _u_flat(x, order):
    B, m = x.shape
    out = [np.zeros(B)]
    shape = (B,)
    for _ in range(order):
        shape = shape + (m,)
        out.append(np.zeros(shape))
    return out


def _u_space_form(kappa):
    def derivs(x, order):
        B, m = x.shape
        s = 1.0 + 0.25 * kappa * np.sum(x * x, axis=1)
        out = [-np.log(s)]
        if order >= 1:
            out.append(-(0.5 * kappa) * x / s[:, None])
        if order >= 2:
            eye = np.eye(m)
            u2 = (-(0.5 * kappa) / s)[:, None, None] * eye \
                + (0.25 * kappa ** 2 / s ** 2)[:, None, None] * (x[:, :, None] * x[:, None, :])
            out.append(u2)
        if order >= 3:
            eye = np.eye(m)
            sym = (np.einsum("ij,bk->bijk", eye, x)
                   + np.einsum("ik,bj->bijk", eye, x)
                   + np.einsum("jk,bi->bijk", eye, x))
            u3 = (0.25 * kappa ** 2 / s ** 2)[:, None, None, None] * sym \
                - (0.25 * kappa ** 3 / s ** 3)[:, None, None, None] * np.einsum(
                    "bi,bj,bk->bijk", x, x, x)
            out.append(u3)
        return out
    return derivs


def _u_bump(eps, center, Q, skew):
    center = np.asarray(center, dtype=float)
    Q = np.asarray(Q, dtype=float)
    skew = np.zeros(len(center)) if skew is None else np.asarray(skew, dtype=float)

    def derivs(x, order):
        B, m = x.shape
        y = x - center
        v = y @ Q.T  # (Qy)_i, Q symmetric
        q = np.sum(y * v, axis=1)
        E = np.exp(-q)
        a = 1.0 + y @ skew
        out = [eps * a * E]
        if order >= 1:
            out.append(eps * (skew[None, :] - 2.0 * a[:, None] * v) * E[:, None])
        if order >= 2 or order >= 3:
            # braces = d_j (gamma_i - 2 a v_i) - gamma-term bookkeeping:
            # u_ij / (eps E) = -2 g_j v_i - 2 g_i v_j - 2 a Q_ij + 4 a v_i v_j
            gv = (skew[None, :, None] * v[:, None, :]
                  + skew[None, None, :] * v[:, :, None])
            vv = v[:, :, None] * v[:, None, :]
            braces = -2.0 * gv - 2.0 * a[:, None, None] * Q + 4.0 * a[:, None, None] * vv
            if order >= 2:
                out.append(eps * braces * E[:, None, None])
        if order >= 3:
            gQ = (np.einsum("j,ik->ijk", skew, Q)
                  + np.einsum("i,jk->ijk", skew, Q)
                  + np.einsum("k,ij->ijk", skew, Q))
            dbraces = (-2.0 * gQ[None]
                       + 4.0 * np.einsum("k,bi,bj->bijk", skew, v, v)
                       + 4.0 * a[:, None, None, None]
                       * (np.einsum("ik,bj->bijk", Q, v) + np.einsum("bi,jk->bijk", v, Q)))
            u3 = eps * (dbraces - 2.0 * v[:, None, None, :] * braces[:, :, :, None]) \
                * E[:, None, None, None]
            out.append(u3)
        return out
    return derivs


def _u_poly(table, center):
    """table: dict exponent-tuple -> coefficient, u = sum c (x-center)^alpha."""
    center = np.asarray(center, dtype=float)
    expts = np.array(sorted(table.keys()), dtype=int)
    coefs = np.array([table[tuple(t)] for t in expts], dtype=float)

    def eval_table(y, e, c):
        if len(c) == 0:
            return np.zeros(y.shape[0])
        return (y[:, None, :] ** e[None, :, :]).prod(axis=2) @ c

    def diff_table(e, c, i):
        keep = e[:, i] > 0
        e2 = e[keep].copy()
        c2 = c[keep] * e2[:, i]
        e2[:, i] -= 1
        return e2, c2

    def derivs(x, order):
        B, m = x.shape
        y = x - center
        out = [eval_table(y, expts, coefs)]
        tabs = {(): (expts, coefs)}
        for r in range(1, order + 1):
            shape = (B,) + (m,) * r
            arr = np.zeros(shape)
            for idx in np.ndindex(*(m,) * r):
                key = tuple(sorted(idx))
                if key not in tabs:
                    pe, pc = tabs[key[:-1]] if key[:-1] in tabs else tabs[()]
                    # build by differentiating the sorted prefix table
                    pe, pc = tabs[key[:-1]]
                    tabs[key] = diff_table(pe, pc, key[-1])
                e2, c2 = tabs[key]
                arr[(slice(None),) + idx] = eval_table(y, e2, c2)
            out.append(arr)
        return out
    return derivs


# ---------------------------------------------------------------------------
# finite-difference oracle for custom metric callables


_STENCILS = {
    2: {-1: -0.5, 1: 0.5},
    4: {-2: 1.0 / 12.0, -1: -8.0 / 12.0, 1: 8.0 / 12.0, 2: -1.0 / 12.0},
}


def _fd_metric_derivs(gfun, x, order, h, fd_order):
    """[g, dg, d2g, d3g] at a single point by nested central differences."""
    m = len(x)
    st = _STENCILS[fd_order]
    cache = {}

    def ev(off):
        if off not in cache:
            cache[off] = np.asarray(gfun(x + h * np.asarray(off, dtype=float)), dtype=float)
        return cache[off]

    def deriv(dirs):
        ops = {(0,) * m: 1.0}
        for d in dirs:
            new = {}
            for off, c in ops.items():
                for s, cs in st.items():
                    off2 = list(off)
                    off2[d] += s
                    off2 = tuple(off2)
                    new[off2] = new.get(off2, 0.0) + c * cs
            ops = new
        acc = sum(c * ev(off) for off, c in ops.items())
        return acc / h ** len(dirs)

    out = [ev((0,) * m)]
    if order >= 1:
        out.append(np.stack([deriv((d,)) for d in range(m)]))
    if order >= 2:
        G2 = np.empty((m, m) + out[0].shape)
        for c in range(m):
            for d in range(c, m):
                G2[c, d] = G2[d, c] = deriv((c, d))
        out.append(G2)
    if order >= 3:
        G3 = np.empty((m, m, m) + out[0].shape)
        done = {}
        for b in range(m):
            for c in range(b, m):
                for d in range(c, m):
                    done[(b, c, d)] = deriv((b, c, d))
        for idx in np.ndindex(m, m, m):
            G3[idx] = done[tuple(sorted(idx))]
        out.append(G3)
    return out


# ---------------------------------------------------------------------------
# metric model


@dataclass(eq=False)
class MetricModel:
    """Chart-domain metric evaluator with a derivative oracle."""

    dim: int
    family: str
    params: dict = field(default_factory=dict)
    u_derivs: object = None          # conformal families: callable(x, order)
    g_callable: object = None        # custom family: callable(x) -> (m, m)
    fd_step: float = 1e-3
    fd_order: int = 4
    chart_radius: float = math.inf   # chart domain: |x - chart_center| < radius
    chart_center: np.ndarray = None
    injectivity_budget: float = math.inf

    def __post_init__(self):
        if self.chart_center is None:
            self.chart_center = np.zeros(self.dim)
        else:
            self.chart_center = np.asarray(self.chart_center, dtype=float)

    # families ------------------------------------------------------------

    @classmethod
    def flat(cls, dim):
        return cls(dim=dim, family="flat", u_derivs=_u_flat)

    @classmethod
    def space_form(cls, dim, kappa):
        budget = 0.9 * math.pi / math.sqrt(kappa) if kappa > 0 else math.inf
        radius = 0.999 * 2.0 / math.sqrt(-kappa) if kappa < 0 else math.inf
        return cls(dim=dim, family="space_form", params={"kappa": kappa},
                   u_derivs=_u_space_form(kappa), chart_radius=radius,
                   injectivity_budget=budget)

    @classmethod
    def conformal_bump(cls, dim, epsilon, center=None, Q=None, skew=None, radius=2.0):
        center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        Q = np.eye(dim) if Q is None else np.asarray(Q, dtype=float)
        if Q.shape != (dim, dim) or np.max(np.abs(Q - Q.T)) > 1e-12:
            raise ContractError("Q must be a symmetric dim x dim matrix")
        params = {"epsilon": epsilon, "center": center, "Q": Q, "skew": skew,
                  "radius": radius}
        return cls(dim=dim, family="conformal_bump", params=params,
                   u_derivs=_u_bump(epsilon, center, Q, skew),
                   chart_radius=radius, injectivity_budget=radius)

    @classmethod
    def custom_conformal(cls, dim, table, center=None, radius=2.0):
        center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        table = {tuple(k): float(v) for k, v in table.items()}
        for k in table:
            if len(k) != dim or any(e < 0 for e in k):
                raise ContractError(f"bad exponent tuple {k}")
        return cls(dim=dim, family="custom", params={"table": table, "center": center,
                                                     "radius": radius},
                   u_derivs=_u_poly(table, center), chart_radius=radius,
                   injectivity_budget=radius)

    @classmethod
    def custom(cls, dim, g_callable, radius=2.0, fd_step=1e-3, fd_order=4):
        if fd_order not in _STENCILS:
            raise CapabilityError(f"fd_order must be one of {sorted(_STENCILS)}")
        return cls(dim=dim, family="custom", g_callable=g_callable,
                   fd_step=fd_step, fd_order=fd_order, chart_radius=radius,
                   injectivity_budget=radius)

    # evaluation ----------------------------------------------------------

    @property
    def is_conformal(self):
        return self.u_derivs is not None

    def g(self, x):
        """Metric matrices; x of shape (m,) or (B, m)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x[None] if single else x
        if self.is_conformal:
            u = self.u_derivs(xb, 0)[0]
            out = np.exp(2.0 * u)[:, None, None] * np.eye(self.dim)
        else:
            out = np.stack([np.asarray(self.g_callable(p), dtype=float) for p in xb])
        return out[0] if single else out

    def metric_derivs(self, x, order):
        """[g, dg, d2g, d3g][:order+1] at a single point x.

        Index layout: dg[d, i, j] = d_d g_ij; d2g[c, d, i, j]; d3g[b, c, d, i, j].
        """
        x = np.asarray(x, dtype=float)
        m = self.dim
        if self.is_conformal:
            us = self.u_derivs(x[None], order)
            e2u = math.exp(2.0 * us[0][0])
            eye = np.eye(m)
            out = [e2u * eye]
            if order >= 1:
                u1 = us[1][0]
                out.append(2.0 * e2u * np.einsum("d,ij->dij", u1, eye))
            if order >= 2:
                u2 = us[2][0]
                f2 = 2.0 * u2 + 4.0 * np.einsum("c,d->cd", u1, u1)
                out.append(e2u * np.einsum("cd,ij->cdij", f2, eye))
            if order >= 3:
                u3 = us[3][0]
                f3 = (2.0 * u3
                      + 4.0 * (np.einsum("bc,d->bcd", u2, u1)
                               + np.einsum("bd,c->bcd", u2, u1)
                               + np.einsum("cd,b->bcd", u2, u1))
                      + 8.0 * np.einsum("b,c,d->bcd", u1, u1, u1))
                out.append(e2u * np.einsum("bcd,ij->bcdij", f3, eye))
            return out
        scale = max(1.0, float(np.max(np.abs(x))))
        return _fd_metric_derivs(self.g_callable, x, order, self.fd_step * scale,
                                 self.fd_order)

    def in_domain(self, x):
        x = np.asarray(x, dtype=float)
        if not math.isfinite(self.chart_radius):
            return np.ones(x.shape[:-1], dtype=bool) if x.ndim > 1 else True
        d = np.linalg.norm(x - self.chart_center, axis=-1)
        return d < self.chart_radius

    def describe(self):
        p = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
             for k, v in self.params.items()}
        return {"family": self.family, "dim": self.dim, "params": p}


# ---------------------------------------------------------------------------
# Christoffel symbols


def _christoffels_conformal(metric, xb, want_grad=False):
    order = 2 if want_grad else 1
    us = metric.u_derivs(xb, order)
    u1 = us[1]
    m = metric.dim
    eye = np.eye(m)
    gam = (np.einsum("bi,jk->bkij", u1, eye)
           + np.einsum("bj,ik->bkij", u1, eye)
           - np.einsum("bk,ij->bkij", u1, eye))
    if not want_grad:
        return gam, None
    u2 = us[2]
    dgam = (np.einsum("bil,jk->blkij", u2, eye)
            + np.einsum("bjl,ik->blkij", u2, eye)
            - np.einsum("bkl,ij->blkij", u2, eye))
    return gam, dgam


def _christoffels_generic(metric, x, want_grad=False):
    G = metric.metric_derivs(x, 2 if want_grad else 1)
    g0, g1 = G[0], G[1]
    try:
        ginv = np.linalg.inv(g0)
    except np.linalg.LinAlgError as exc:
        raise DegenerateMetricError(f"metric singular at {x}") from exc
    if np.linalg.eigvalsh(g0)[0] <= 0:
        raise DegenerateMetricError(f"metric not positive definite at {x}")
    # C[l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    C = np.einsum("ijl->lij", g1) + np.einsum("jil->lij", g1) - g1
    gam = 0.5 * np.einsum("kl,lij->kij", ginv, C)
    if not want_grad:
        return gam, None
    g2 = G[2]
    dginv = -np.einsum("ka,dab,bl->dkl", ginv, g1, ginv)
    dC = (np.einsum("dijl->dlij", g2)
          + np.einsum("djil->dlij", g2)
          - np.einsum("dlij->dlij", g2))
    dgam = 0.5 * (np.einsum("dkl,lij->dkij", dginv, C)
                  + np.einsum("kl,dlij->dkij", ginv, dC))
    return gam, dgam


def christoffels(metric, x):
    """Christoffel symbols Gamma[k, i, j] at x ((m,) or (B, m))."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    if not np.all(metric.in_domain(xb)):
        raise OutOfDomainError("point outside chart domain")
    if metric.is_conformal:
        gam, _ = _christoffels_conformal(metric, xb)
        return gam[0] if single else gam
    out = np.stack([_christoffels_generic(metric, p)[0] for p in xb])
    return out[0] if single else out


def _christoffels_with_grad_batch(metric, xb):
    if metric.is_conformal:
        return _christoffels_conformal(metric, xb, want_grad=True)
    gams, dgams = [], []
    for p in xb:
        g, d = _christoffels_generic(metric, p, want_grad=True)
        gams.append(g)
        dgams.append(d)
    return np.stack(gams), np.stack(dgams)


# ---------------------------------------------------------------------------
# curvature at a point


@dataclass(eq=False)
class CurvatureAtPoint:
    """Frame, curvature tensor, first covariant derivative and contractions."""

    point: np.ndarray
    frame: np.ndarray          # columns g-orthonormal at point
    riemann: np.ndarray        # R[i,j,k,l], see module docstring
    riemann_grad: np.ndarray   # (grad_a R)[i,j,k,l], derivative index first
    ricci: np.ndarray
    scalar: float
    scalar_grad: np.ndarray    # frame components
    residuals: dict = field(default_factory=dict)

    def ric_quadratic(self, thetas):
        """Ric(Theta, Theta) for frame-component directions (N, m)."""
        return np.einsum("na,ab,nb->n", thetas, self.ricci, thetas)

    def grad_ric_cubic(self, thetas):
        """(grad_Theta Ric)(Theta, Theta) for frame-component directions."""
        T = np.einsum("akbkc->abc", self.riemann_grad)
        return np.einsum("na,nb,nc,abc->n", thetas, thetas, thetas, T)


def orthonormal_frame(g0):
    """Gram-Schmidt of the coordinate basis against g0, deterministic order."""
    m = g0.shape[0]
    E = np.zeros((m, m))
    for i in range(m):
        v = np.zeros(m)
        v[i] = 1.0
        for j in range(i):
            v = v - (E[:, j] @ g0 @ v) * E[:, j]
        nrm = math.sqrt(v @ g0 @ v)
        if nrm <= 0 or not math.isfinite(nrm):
            raise DegenerateMetricError("metric not positive definite")
        E[:, i] = v / nrm
    return E


def curvature_at(metric, p, tol=None):
    """Curvature data at p: frame, Riemann, grad Riemann, Ricci, scalar, grad scalar.

    The residual of every stored symmetry and both Bianchi identities is
    attached; residuals above `tol` raise a diagnostic warning.
    """
    p = np.asarray(p, dtype=float)
    if not np.all(metric.in_domain(p)):
        raise OutOfDomainError("point outside chart domain")
    if tol is None:
        tol = 1e-7 if metric.is_conformal else 1e-5
    m = metric.dim
    G = metric.metric_derivs(p, 3)
    g0, g1 = G[0], G[1]
    gam, dgam = (_christoffels_conformal(metric, p[None], want_grad=True)
                 if metric.is_conformal else
                 _christoffels_generic(metric, p, want_grad=True))
    if metric.is_conformal:
        gam, dgam = gam[0], dgam[0]
        us = metric.u_derivs(p[None], 3)
        u3 = us[3][0]
        eye = np.eye(m)
        # d2gam[c,d,k,i,j] = u_icd d_jk + u_jcd d_ik - u_kcd d_ij
        d2gam = (np.einsum("icd,jk->cdkij", u3, eye)
                 + np.einsum("jcd,ik->cdkij", u3, eye)
                 - np.einsum("kcd,ij->cdkij", u3, eye))
    else:
        g2, g3 = G[2], G[3]
        ginv = np.linalg.inv(g0)
        dginv = -np.einsum("ka,dab,bl->dkl", ginv, g1, ginv)
        d2ginv = (-np.einsum("cka,dab,bl->cdkl", dginv, g1, ginv)
                  - np.einsum("ka,cdab,bl->cdkl", ginv, g2, ginv)
                  - np.einsum("ka,dab,cbl->cdkl", ginv, g1, dginv))
        C = np.einsum("ijl->lij", g1) + np.einsum("jil->lij", g1) - g1
        dC = (np.einsum("dijl->dlij", g2) + np.einsum("djil->dlij", g2) - g2)
        d2C = (np.einsum("cdijl->cdlij", g3) + np.einsum("cdjil->cdlij", g3) - g3)
        d2gam = 0.5 * (np.einsum("cdkl,lij->cdkij", d2ginv, C)
                       + np.einsum("ckl,dlij->cdkij", dginv, dC)
                       + np.einsum("dkl,clij->cdkij", dginv, dC)
                       + np.einsum("kl,cdlij->cdkij", ginv, d2C))

    # T[i,j,k,s]: curvature operator components, R(e_i,e_j)e_k = T[i,j,k,s] e_s
    T = (np.einsum("isjk->ijks", dgam) - np.einsum("jsik->ijks", dgam)
         + np.einsum("sim,mjk->ijks", gam, gam) - np.einsum("sjm,mik->ijks", gam, gam))
    R4 = np.einsum("ls,ijks->ijkl", g0, T)

    dT = (np.einsum("aisjk->aijks", d2gam) - np.einsum("ajsik->aijks", d2gam)
          + np.einsum("asim,mjk->aijks", dgam, gam)
          + np.einsum("sim,amjk->aijks", gam, dgam)
          - np.einsum("asjm,mik->aijks", dgam, gam)
          - np.einsum("sjm,amik->aijks", gam, dgam))
    dR4 = np.einsum("als,ijks->aijkl", g1, T) + np.einsum("ls,aijks->aijkl", g0, dT)
    nab = dR4 \
        - np.einsum("mai,mjkl->aijkl", gam, R4) \
        - np.einsum("maj,imkl->aijkl", gam, R4) \
        - np.einsum("mak,ijml->aijkl", gam, R4) \
        - np.einsum("mal,ijkm->aijkl", gam, R4)

    E = orthonormal_frame(g0)
    R4f = np.einsum("ai,bj,ck,dl,abcd->ijkl", E, E, E, E, R4)
    nabf = np.einsum("pa,bi,cj,dk,el,pbcde->aijkl", E, E, E, E, E, nab)

    # stored convention: swap the last pair (see module docstring)
    S = R4f.transpose(0, 1, 3, 2)
    nS = nabf.transpose(0, 1, 2, 4, 3)

    ric = np.einsum("kikj->ij", S)
    scal = float(np.trace(ric))
    nric = np.einsum("akikj->aij", nS)
    sgrad = np.einsum("aii->a", nric)

    scale = max(1.0, float(np.max(np.abs(S))))
    gscale = max(1.0, float(np.max(np.abs(nS))))
    res = {
        "antisym_first": float(np.max(np.abs(S + S.transpose(1, 0, 2, 3)))) / scale,
        "antisym_last": float(np.max(np.abs(S + S.transpose(0, 1, 3, 2)))) / scale,
        "pair_symmetry": float(np.max(np.abs(S - S.transpose(2, 3, 0, 1)))) / scale,
        "bianchi_first": float(np.max(np.abs(
            S + S.transpose(0, 2, 3, 1) + S.transpose(0, 3, 1, 2)))) / scale,
        "bianchi_second": float(np.max(np.abs(
            nS + nS.transpose(3, 1, 2, 4, 0) + nS.transpose(4, 1, 2, 0, 3)))) / gscale,
        "frame_orthonormality": float(np.max(np.abs(E.T @ g0 @ E - np.eye(m)))),
        # 2 div Ric = grad scal (contracted second Bianchi)
        "contracted_bianchi": float(np.max(np.abs(
            2.0 * np.einsum("aai->i", nric) - sgrad))) / max(1.0, float(np.max(np.abs(sgrad)))),
    }
    bad = {k: v for k, v in res.items() if v > tol}
    if bad:
        warnings.warn(f"curvature residuals above tol={tol}: {bad}", stacklevel=2)

    return CurvatureAtPoint(point=p.copy(), frame=E, riemann=S, riemann_grad=nS,
                            ricci=ric, scalar=scal, scalar_grad=sgrad,
                            residuals=res)


def scalar_curvature(metric, x):
    return curvature_at(metric, np.asarray(x, dtype=float)).scalar


# ---------------------------------------------------------------------------
# geodesic flow


def default_steps(speed):
    return max(64, int(math.ceil(speed / 0.01)))


def _flow_accel_conformal(metric, x, v, J=None, K=None):
    us = metric.u_derivs(x, 2 if J is not None else 1)
    u1 = us[1]
    uv = np.einsum("bi,bi->b", u1, v)
    v2 = np.einsum("bi,bi->b", v, v)
    acc = -(2.0 * uv[:, None] * v - u1 * v2[:, None])
    if J is None:
        return acc, None
    u2 = us[2]
    W = np.einsum("bkl,bla->bka", u2, J)
    vW = np.einsum("bi,bia->ba", v, W)
    dterm = 2.0 * np.einsum("ba,bk->bka", vW, v) - W * v2[:, None, None]
    t1 = np.einsum("bi,bia,bk->bka", u1, K, v)
    t2 = uv[:, None, None] * K
    t3 = np.einsum("bk,ba->bka", u1, np.einsum("bi,bia->ba", v, K))
    Kdot = -dterm - 2.0 * (t1 + t2 - t3)
    return acc, Kdot


def _flow_accel_generic(metric, x, v, J=None, K=None):
    gam, dgam = _christoffels_with_grad_batch(metric, x) if J is not None else \
        (np.stack([_christoffels_generic(metric, p)[0] for p in x]), None)
    acc = -np.einsum("bkij,bi,bj->bk", gam, v, v)
    if J is None:
        return acc, None
    Kdot = (-np.einsum("blkij,bla,bi,bj->bka", dgam, J, v, v)
            - 2.0 * np.einsum("bkij,bia,bj->bka", gam, K, v))
    return acc, Kdot


def geodesic_flow(metric, p, v, steps=None, want_jacobian=False, energy_tol=1e-8):
    """Integrate the geodesic ODE from p with chart velocities v (B, m).

    Returns (x, J): endpoints and, when requested, the sensitivity of the
    endpoint to the initial chart velocity (J(0) = 0, J'(0) = I), i.e. the
    differential of exp_p in chart coordinates.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    vb = v[None] if single else v
    B, m = vb.shape
    p = np.asarray(p, dtype=float)
    if not np.all(metric.in_domain(p)):
        raise OutOfDomainError("base point outside chart domain")
    g0 = metric.g(p)
    speeds = np.sqrt(np.einsum("bi,ij,bj->b", vb, g0, vb))
    maxspeed = float(np.max(speeds)) if B else 0.0
    if maxspeed > metric.injectivity_budget:
        raise OutOfDomainError(
            f"|v| = {maxspeed:.4g} exceeds injectivity budget "
            f"{metric.injectivity_budget:.4g}")
    if steps is None:
        steps = default_steps(maxspeed)

    accel = _flow_accel_conformal if metric.is_conformal else _flow_accel_generic
    x = np.tile(p, (B, 1))
    vel = vb.copy()
    J = np.zeros((B, m, m)) if want_jacobian else None
    K = np.tile(np.eye(m), (B, 1, 1)) if want_jacobian else None
    h = 1.0 / steps

    for step in range(steps):
        if want_jacobian:
            a1, kd1 = accel(metric, x, vel, J, K)
            x2, v2, J2, K2 = (x + 0.5 * h * vel, vel + 0.5 * h * a1,
                              J + 0.5 * h * K, K + 0.5 * h * kd1)
            a2, kd2 = accel(metric, x2, v2, J2, K2)
            x3, v3, J3, K3 = (x + 0.5 * h * v2, vel + 0.5 * h * a2,
                              J + 0.5 * h * K2, K + 0.5 * h * kd2)
            a3, kd3 = accel(metric, x3, v3, J3, K3)
            x4, v4, J4, K4 = (x + h * v3, vel + h * a3, J + h * K3, K + h * kd3)
            a4, kd4 = accel(metric, x4, v4, J4, K4)
            x = x + (h / 6.0) * (vel + 2 * v2 + 2 * v3 + v4)
            vel = vel + (h / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
            J = J + (h / 6.0) * (K + 2 * K2 + 2 * K3 + K4)
            K = K + (h / 6.0) * (kd1 + 2 * kd2 + 2 * kd3 + kd4)
        else:
            a1, _ = accel(metric, x, vel)
            x2, v2 = x + 0.5 * h * vel, vel + 0.5 * h * a1
            a2, _ = accel(metric, x2, v2)
            x3, v3 = x + 0.5 * h * v2, vel + 0.5 * h * a2
            a3, _ = accel(metric, x3, v3)
            x4, v4 = x + h * v3, vel + h * a3
            a4, _ = accel(metric, x4, v4)
            x = x + (h / 6.0) * (vel + 2 * v2 + 2 * v3 + v4)
            vel = vel + (h / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
        inside = metric.in_domain(x)
        if not np.all(inside):
            raise OutOfDomainError("geodesic left chart domain",
                                   exit_time=(step + 1) * h)

    if maxspeed > 0:
        gx = metric.g(x)
        e_end = np.einsum("bi,bij,bj->b", vel, gx, vel)
        drift = np.max(np.abs(e_end - speeds ** 2)) / max(maxspeed ** 2, 1e-300)
        if drift > energy_tol:
            raise AccuracyError(
                f"geodesic energy drift {drift:.3e} exceeds {energy_tol:.1e}")

    if single:
        return (x[0], J[0]) if want_jacobian else (x[0], None)
    return x, J


def exp_map(metric, p, v, steps=None):
    """Endpoint of the geodesic from p with initial velocity v (chart components)."""
    x, _ = geodesic_flow(metric, p, v, steps=steps)
    return x


def exp_map_batch(metric, p, v, steps=None, want_jacobian=False):
    return geodesic_flow(metric, p, v, steps=steps, want_jacobian=want_jacobian)


def log_map(metric, p, q, steps=None, tol=1e-12, maxit=30):
    """Chart velocities v with exp_p(v) = q, by Newton on the flow."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    qb = q[None] if single else q
    p = np.asarray(p, dtype=float)
    v = qb - p[None]
    scale = max(1.0, float(np.max(np.abs(qb))))
    for _ in range(maxit):
        x, J = geodesic_flow(metric, p, v, steps=steps, want_jacobian=True)
        r = qb - x
        if float(np.max(np.abs(r))) < tol * scale:
            return v[0] if single else v
        v = v + np.linalg.solve(J, r[..., None])[..., 0]
    raise NonConvergenceError(f"log_map did not converge within {maxit} iterations")


def geodesic_distance(metric, p, q, steps=None):
    v = log_map(metric, p, q, steps=steps)
    g0 = metric.g(np.asarray(p, dtype=float))
    if v.ndim == 1:
        return float(math.sqrt(v @ g0 @ v))
    return np.sqrt(np.einsum("bi,ij,bj->b", v, g0, v))


def find_scalar_critical_point(metric, x0, tol=1e-12, maxit=60, fd_step=1e-4):
    """Newton refinement of a critical point of the scalar curvature."""
    x = np.asarray(x0, dtype=float).copy()
    m = metric.dim

    def chart_grad(pt):
        c = curvature_at(metric, pt)
        return np.linalg.solve(c.frame.T, c.scalar_grad)

    g = chart_grad(x)
    for _ in range(maxit):
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return x
        H = np.empty((m, m))
        for d in range(m):
            e = np.zeros(m)
            e[d] = fd_step
            H[:, d] = (chart_grad(x + e) - chart_grad(x - e)) / (2.0 * fd_step)
        H = 0.5 * (H + H.T)
        step = np.linalg.solve(H, g)
        lam = 1.0
        while lam > 1e-4:
            xn = x - lam * step
            gnew = chart_grad(xn)
            if np.linalg.norm(gnew) < gn:
                x, g = xn, gnew
                break
            lam *= 0.5
        else:
            raise NonConvergenceError("critical point search stagnated")
    raise NonConvergenceError(f"no critical point within {maxit} Newton steps")
