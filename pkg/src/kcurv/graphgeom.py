"""Exact numerical geometry of perturbed geodesic spheres.

A leaf is the image of Theta -> exp_p(rho (1 - w(Theta)) Theta) over a
sphere grid.  Everything here is computed from the ambient metric at the
actual surface points (tangent vectors through the variational Jacobian of
the exponential map, derivatives of the unit normal spectrally on the
parameter sphere); truncated expansions are used only as test targets in
`verify`.

The unit normal follows the inward convention N = (-Upsilon + A^j Z_j)/|.|,
which makes the principal curvatures of round spheres positive
(kappa_i = 1/rho in flat space).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import symfunc
from .errors import AccuracyError, ContractError, DegenerateLeafError, GraphConditionError
from .manifold import christoffels, curvature_at, geodesic_flow
from .sphere import SphereField, sphere_gradient

__all__ = [
    "PerturbedSphere",
    "LeafGeometry",
    "embed",
    "first_form",
    "unit_normal",
    "second_form",
    "shape_and_sigma",
    "compute_geometry",
]

B_ASYM_TOL = 1e-6


@dataclass(eq=False)
class PerturbedSphere:
    """Radial graph S_rho(p, w) over the geodesic sphere of radius rho."""

    metric: object
    p: np.ndarray
    rho: float
    w: SphereField
    curv: object = None          # CurvatureAtPoint at p, computed lazily
    steps: int = None
    _geom: object = field(default=None, repr=False)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if not self.w.is_scalar:
            raise ContractError("w must be a scalar field")
        wmax = self.w.sup()
        if wmax >= 0.5:
            raise GraphConditionError(f"max|w| = {wmax:.3f} >= 1/2")
        if self.rho <= 0:
            raise ContractError("rho must be positive")
        if self.rho * (1.0 + wmax) > self.metric.injectivity_budget:
            raise GraphConditionError(
                f"rho(1+max|w|) = {self.rho * (1 + wmax):.4g} exceeds "
                f"injectivity budget {self.metric.injectivity_budget:.4g}")

    @property
    def grid(self):
        return self.w.grid

    def curvature(self):
        if self.curv is None:
            self.curv = curvature_at(self.metric, self.p)
        return self.curv

    def geometry(self, kmax=None):
        need = kmax if kmax is not None else self.grid.n
        if self._geom is None or len(self._geom.sigma) <= need:
            self._geom = compute_geometry(self, kmax=need)
        return self._geom


@dataclass(eq=False)
class LeafGeometry:
    """Per-node geometric data of one leaf."""

    positions: np.ndarray   # (N, m) chart points
    upsilon: np.ndarray     # (N, m) radial unit field at the surface
    tangents: np.ndarray    # (N, m, n): Z_j chart components, column j
    first: np.ndarray       # (N, n, n) first fundamental form
    normal: np.ndarray      # (N, m) unit normal (inward)
    second: np.ndarray      # (N, n, n) symmetrized second fundamental form
    shape_sym: np.ndarray   # (N, n, n) symmetrized shape operator
    principal: np.ndarray   # (N, n) principal curvatures
    sigma: list             # sigma[k]: (N,) values, k = 0..kmax
    b_asym: float           # recorded asymmetry residual of b before symmetrizing
    newton_min_eig: np.ndarray = None  # admissibility diagnostic, per node


def compute_geometry(ps, kmax=None):
    """Full exact geometry pipeline for a perturbed sphere."""
    grid = ps.grid
    n, m = grid.n, grid.m
    if kmax is None:
        kmax = n
    if ps.metric.dim != m:
        raise ContractError(
            f"metric dim {ps.metric.dim} does not match grid ambient dim {m}")
    wv = ps.w.values
    gw = sphere_gradient(grid, wv)                     # (N, n) frame components
    curv = ps.curvature()
    E = curv.frame

    radii = ps.rho * (1.0 - wv)
    y = radii[:, None] * grid.nodes                    # frame-normal coordinates
    v0 = y @ E.T                                       # chart velocities
    q, Jv = geodesic_flow(ps.metric, ps.p, v0, steps=ps.steps, want_jacobian=True)
    XN = Jv @ E                                        # coordinate fields X_a at q
    ups = np.einsum("nca,na->nc", XN, grid.nodes)
    ups_j = np.einsum("nca,nja->ncj", XN, grid.frames)
    Z = ps.rho * ((1.0 - wv)[:, None, None] * ups_j
                  - ups[:, :, None] * gw[:, None, :])

    gq = ps.metric.g(q)
    first = np.einsum("nci,ncd,ndj->nij", Z, gq, Z)

    try:
        A = np.linalg.solve(first, -ps.rho * gw[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DegenerateLeafError("singular first fundamental form") from exc
    ntil = -ups + np.einsum("ncj,nj->nc", Z, A)
    nn = np.einsum("nc,ncd,nd->n", ntil, gq, ntil)
    if np.any(nn <= 0):
        raise DegenerateLeafError("normal field degenerated")
    normal = ntil / np.sqrt(nn)[:, None]

    dN = sphere_gradient(grid, normal)                 # (N, n, m): d_i N^k
    gam_q = christoffels(ps.metric, q)
    cov = dN + np.einsum("nkcd,nci,nd->nik", gam_q, Z, normal)
    b = -np.einsum("nik,nkd,ndj->nij", cov, gq, Z)
    asym = float(np.max(np.abs(b - b.transpose(0, 2, 1))))
    scale = max(1.0, float(np.max(np.abs(b))))
    if asym / scale > B_ASYM_TOL:
        raise AccuracyError(
            f"second form asymmetry {asym / scale:.2e} exceeds {B_ASYM_TOL:.0e}; "
            "grid under-resolves the leaf")
    b = 0.5 * (b + b.transpose(0, 2, 1))

    low = np.linalg.cholesky(first)
    X = np.linalg.solve(low, b)
    shape_sym = np.linalg.solve(low, X.transpose(0, 2, 1)).transpose(0, 2, 1)
    shape_sym = 0.5 * (shape_sym + shape_sym.transpose(0, 2, 1))
    principal = np.linalg.eigvalsh(shape_sym)
    sigma = [np.asarray(s) for s in symfunc.sigma_all(shape_sym, kmax)]

    if kmax >= 1:
        T = symfunc.newton_transform(shape_sym, kmax - 1)
        tmin = np.linalg.eigvalsh(T)[:, 0]
    else:
        tmin = None

    return LeafGeometry(positions=q, upsilon=ups, tangents=Z, first=first,
                        normal=normal, second=b, shape_sym=shape_sym,
                        principal=principal, sigma=sigma, b_asym=asym / scale,
                        newton_min_eig=tmin)


def embed(ps):
    """Surface positions and tangent vectors Z_j (chart components)."""
    g = ps.geometry()
    return g.positions, g.tangents


def first_form(ps):
    """Exact first fundamental form g(Z_i, Z_j) per node."""
    return ps.geometry().first


def unit_normal(ps):
    """Inward unit normal per node (chart components)."""
    return ps.geometry().normal


def second_form(ps):
    """Symmetrized second fundamental form -g(grad_{Z_i} N, Z_j) per node."""
    return ps.geometry().second


def shape_and_sigma(ps, k):
    """Shape operator (symmetrized), principal curvatures and the sigma_k field."""
    n = ps.grid.n
    if not 0 <= k <= n:
        raise ContractError(f"k={k} outside 0..{n}")
    g = ps.geometry(kmax=max(k, 1))
    return g.shape_sym, g.principal, SphereField(ps.grid, g.sigma[k])
