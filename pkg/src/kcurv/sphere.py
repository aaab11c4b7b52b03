"""Quadrature grids and spectral calculus on S^n (n = 2 or 3).

Grids are Gauss-Legendre x equispaced-longitude products (S^2), extended by
a Gauss-Chebyshev (second kind) polar angle for S^3; both are antipodally
closed so parity arguments hold to machine precision.

Harmonics of degree d are represented as homogeneous harmonic polynomials:
the nullspace of the Laplacian on degree-d monomials, orthonormalized
against the grid's discrete inner product (which is exact on polynomial
products up to the band limit).  This gives values, ambient gradients and
ambient Hessians of any bandlimited field by monomial calculus, with no
pole singularities.  Covariant derivatives on the sphere follow from

    grad f = (I - Theta Theta^T) grad P,
    Hess f(X, Y) = X^T (grad^2 P) Y - (Theta . grad P) (X . Y),

for any smooth extension P of f and tangent X, Y.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import roots_chebyu

from .errors import CapabilityError, ContractError, SolvabilityError

__all__ = [
    "SphereGrid",
    "SphereField",
    "AliasingWarning",
    "build_grid",
    "quad",
    "analyze",
    "synthesize",
    "project_kernel",
    "laplace_beltrami",
    "solve_helmholtz",
    "tangential_derivatives",
    "sphere_gradient",
    "sphere_hessian",
    "random_bandlimited",
    "sphere_volume",
]

ALIAS_TAIL_FRACTION = 1e-6


class AliasingWarning(UserWarning):
    """Field has significant spectral energy near the grid band limit."""


def sphere_volume(n):
    """Surface volume of the unit n-sphere."""
    return 2.0 * math.pi ** ((n + 1) / 2.0) / math.gamma((n + 1) / 2.0)


# ---------------------------------------------------------------------------
# monomial bookkeeping


def _monomial_exponents(m, d):
    """Exponent tuples of total degree d in m variables, lexicographic."""
    if m == 1:
        return [(d,)]
    out = []
    for first in range(d, -1, -1):
        for rest in _monomial_exponents(m - 1, d - first):
            out.append((first,) + rest)
    return out


def _monomial_values(nodes, expts):
    """(N, nmon) matrix of monomial values at the nodes."""
    return np.prod(nodes[:, None, :] ** np.asarray(expts, dtype=float)[None, :, :], axis=2)


def _laplacian_map(expts_d, index_dm2, m):
    """Matrix of Delta: degree-d monomial coeffs -> degree-(d-2) coeffs."""
    L = np.zeros((len(index_dm2), len(expts_d)))
    for j, a in enumerate(expts_d):
        for i in range(m):
            if a[i] >= 2:
                b = list(a)
                b[i] -= 2
                L[index_dm2[tuple(b)], j] += a[i] * (a[i] - 1)
    return L


def _harmonic_dim(m, d):
    """dim of spherical harmonics of degree d on S^{m-1}."""
    if d == 0:
        return 1
    if d == 1:
        return m
    return math.comb(d + m - 1, m - 1) - math.comb(d + m - 3, m - 1)


@dataclass(eq=False)
class _DegreeBasis:
    """Harmonic polynomials of one degree: monomial data and node values."""

    expts: np.ndarray          # (nmon, m) int
    index: dict                # exponent tuple -> row in expts
    mono_values: np.ndarray    # (N, nmon)
    coeffs: np.ndarray         # (nmon, nharm), columns orthonormal on the grid
    values: np.ndarray         # (N, nharm) = mono_values @ coeffs


def _build_degree_bases(nodes, weights, m, L):
    expts_by_d = []
    index_by_d = []
    mono_by_d = []
    for d in range(L + 1):
        e = _monomial_exponents(m, d)
        expts_by_d.append(np.array(e, dtype=int))
        index_by_d.append({t: i for i, t in enumerate(e)})
        mono_by_d.append(_monomial_values(nodes, e))

    bases = []
    for d in range(L + 1):
        nmon = len(expts_by_d[d])
        if d <= 1:
            B = np.eye(nmon)
        else:
            lap = _laplacian_map([tuple(t) for t in expts_by_d[d]], index_by_d[d - 2], m)
            # Delta is onto degree d-2, so the nullity is nmon(d) - nmon(d-2)
            nullity = nmon - lap.shape[0]
            _, s, vh = np.linalg.svd(lap)
            assert s[lap.shape[0] - 1] > 1e-10 * s[0]  # surjectivity is structural
            B = vh[lap.shape[0]:].T
            assert B.shape[1] == nullity == _harmonic_dim(m, d)
        V = mono_by_d[d] @ B
        for _ in range(2):  # two rounds leave the Gram matrix at I to ~1e-15
            G = V.T @ (weights[:, None] * V)
            try:
                low = np.linalg.cholesky(G)
                X = np.linalg.inv(low).T
            except np.linalg.LinAlgError:
                lam, Q = np.linalg.eigh(G)
                lam = np.clip(lam, 1e-300, None)
                X = Q @ np.diag(lam ** -0.5) @ Q.T
            B = B @ X
            V = V @ X
        bases.append(
            _DegreeBasis(
                expts=expts_by_d[d],
                index=index_by_d[d],
                mono_values=mono_by_d[d],
                coeffs=B,
                values=V,
            )
        )
    return bases


# ---------------------------------------------------------------------------
# grids


@dataclass(eq=False)
class SphereGrid:
    """Quadrature grid on S^n with an orthonormal harmonic basis."""

    n: int
    L: int
    nodes: np.ndarray       # (N, n+1) unit vectors
    weights: np.ndarray     # (N,)
    frames: np.ndarray      # (N, n, n+1) orthonormal tangent frames
    antipode: np.ndarray    # (N,) index of -Theta for each node
    bases: list = field(repr=False)

    @property
    def m(self):
        return self.n + 1

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def vol(self):
        return sphere_volume(self.n)

    @property
    def num_basis(self):
        return sum(b.values.shape[1] for b in self.bases)

    @property
    def degrees(self):
        """Degree label of each global basis column."""
        return np.concatenate(
            [np.full(b.values.shape[1], d, dtype=int) for d, b in enumerate(self.bases)]
        )

    def degree_slices(self):
        out = []
        start = 0
        for b in self.bases:
            nh = b.values.shape[1]
            out.append(slice(start, start + nh))
            start += nh
        return out

    def basis_values(self):
        return np.concatenate([b.values for b in self.bases], axis=1)

    def with_frames(self, frames):
        frames = np.asarray(frames, dtype=float)
        if frames.shape != self.frames.shape:
            raise ContractError("frame array shape mismatch")
        return replace(self, frames=frames)


def _s2_layout(L):
    nG = L + 1
    nlon = 2 * (L + 1)
    u, wu = np.polynomial.legendre.leggauss(nG)
    phis = 2.0 * np.pi * np.arange(nlon) / nlon
    nodes = np.empty((nG * nlon, 3))
    weights = np.empty(nG * nlon)
    frames = np.empty((nG * nlon, 2, 3))
    anti = np.empty(nG * nlon, dtype=int)
    wlon = 2.0 * np.pi / nlon
    for a in range(nG):
        s = math.sqrt(max(0.0, 1.0 - u[a] * u[a]))
        for b in range(nlon):
            i = a * nlon + b
            c, sn = math.cos(phis[b]), math.sin(phis[b])
            nodes[i] = (s * c, s * sn, u[a])
            weights[i] = wu[a] * wlon
            # e_theta (towards decreasing z), e_phi
            frames[i, 0] = (u[a] * c, u[a] * sn, -s)
            frames[i, 1] = (-sn, c, 0.0)
            anti[i] = (nG - 1 - a) * nlon + (b + nlon // 2) % nlon
    return nodes, weights, frames, anti


def _s3_layout(L):
    nodes2, w2, frames2, anti2 = _s2_layout(L)
    N2 = nodes2.shape[0]
    K = L + 1
    u, wu = roots_chebyu(K)  # weight sqrt(1-u^2): exactly the sin^2(psi) measure
    N = K * N2
    nodes = np.empty((N, 4))
    weights = np.empty(N)
    frames = np.empty((N, 3, 4))
    anti = np.empty(N, dtype=int)
    for k in range(K):
        s = math.sqrt(max(0.0, 1.0 - u[k] * u[k]))
        base = k * N2
        nodes[base:base + N2, :3] = s * nodes2
        nodes[base:base + N2, 3] = u[k]
        weights[base:base + N2] = wu[k] * w2
        frames[base:base + N2, 0, :3] = u[k] * nodes2
        frames[base:base + N2, 0, 3] = -s
        frames[base:base + N2, 1:, :3] = frames2
        frames[base:base + N2, 1:, 3] = 0.0
        anti[base:base + N2] = (K - 1 - k) * N2 + anti2
    return nodes, weights, frames, anti


_GRID_CACHE = {}


def build_grid(n, L):
    """Build the quadrature grid and harmonic basis for S^n.

    Parameters
    ----------
    n : int
        Intrinsic dimension, 2 or 3.
    L : int
        Analysis band limit; the quadrature is exact on products of two
        degree-<=L harmonics.

    Returns
    -------
    SphereGrid
    """
    if n not in (2, 3):
        raise CapabilityError(f"only n in {{2, 3}} supported, got n={n}")
    if L < 8:
        raise ContractError(f"band limit L must be >= 8, got {L}")
    key = (n, L)
    if key in _GRID_CACHE:
        return _GRID_CACHE[key]
    if n == 2:
        nodes, weights, frames, anti = _s2_layout(L)
    else:
        nodes, weights, frames, anti = _s3_layout(L)
    bases = _build_degree_bases(nodes, weights, n + 1, L)
    grid = SphereGrid(n=n, L=L, nodes=nodes, weights=weights, frames=frames,
                      antipode=anti, bases=bases)
    _GRID_CACHE[key] = grid
    return grid


# ---------------------------------------------------------------------------
# fields


@dataclass(eq=False)
class SphereField:
    """Node values of a scalar (or stacked) function on a SphereGrid."""

    grid: SphereGrid
    values: np.ndarray
    _coeffs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.num_nodes:
            raise ContractError(
                f"field has {self.values.shape[0]} values for "
                f"{self.grid.num_nodes} nodes")

    @property
    def is_scalar(self):
        return self.values.ndim == 1

    def coeffs(self):
        if self._coeffs is None:
            self._coeffs = analyze(self)
        return self._coeffs

    def sup(self):
        return float(np.max(np.abs(self.values)))

    def __add__(self, other):
        return SphereField(self.grid, self.values + _values_of(other, self.grid))

    def __sub__(self, other):
        return SphereField(self.grid, self.values - _values_of(other, self.grid))

    def __mul__(self, scalar):
        return SphereField(self.grid, self.values * scalar)

    __rmul__ = __mul__


def _values_of(x, grid):
    if isinstance(x, SphereField):
        if x.grid is not grid:
            raise ContractError("fields live on different grids")
        return x.values
    return np.asarray(x, dtype=float)


def quad(fld):
    """Quadrature integral over S^n (componentwise for stacked values)."""
    w = fld.grid.weights
    return np.tensordot(w, fld.values, axes=(0, 0))


def analyze(fld):
    """Harmonic coefficients (projection onto the bandlimited space)."""
    if not fld.is_scalar:
        raise ContractError("analysis applies to scalar fields")
    Y = fld.grid.basis_values()
    return Y.T @ (fld.grid.weights * fld.values)


def synthesize(grid, coeffs):
    """SphereField from harmonic coefficients."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (grid.num_basis,):
        raise ContractError("coefficient vector has wrong length")
    vals = grid.basis_values() @ coeffs
    return SphereField(grid, vals, _coeffs=coeffs.copy())


def _tail_fraction(grid, coeffs):
    tot = float(coeffs @ coeffs)
    if tot == 0.0:
        return 0.0
    deg = grid.degrees
    tail = float(coeffs[deg > grid.L - 2] @ coeffs[deg > grid.L - 2])
    return tail / tot


def _warn_if_aliased(grid, coeffs, who):
    frac = _tail_fraction(grid, coeffs)
    if frac > ALIAS_TAIL_FRACTION:
        warnings.warn(
            f"{who}: {frac:.2e} of spectral energy above degree L-2; "
            "result may be aliased", AliasingWarning, stacklevel=3)


def project_kernel(fld):
    """Split f into its (Delta + n)-kernel part and the complement.

    Returns
    -------
    c : (n+1,) array
        Coefficients against the coordinate functions phi_i = x_i|_{S^n}.
    perp : SphereField
        f - sum_i c_i phi_i (pointwise; retains any unresolved content).
    """
    if not fld.is_scalar:
        raise ContractError("project_kernel applies to scalar fields")
    g = fld.grid
    phi_sq = g.vol / g.m  # integral of x_i^2 over S^n
    c = (g.nodes.T @ (g.weights * fld.values)) / phi_sq
    perp = SphereField(g, fld.values - g.nodes @ c)
    return c, perp


def laplace_beltrami(fld):
    """Laplace-Beltrami operator applied spectrally."""
    g = fld.grid
    c = fld.coeffs()
    _warn_if_aliased(g, c, "laplace_beltrami")
    deg = g.degrees
    out = c * (-deg * (deg + g.n - 1.0))
    return synthesize(g, out)


def solve_helmholtz(fld, kernel_tol=1e-9):
    """Unique solution w of (Delta + n) w = f with w orthogonal to the kernel.

    Raises SolvabilityError when f has a kernel component above tolerance.
    """
    g = fld.grid
    c = fld.coeffs()
    deg = g.degrees
    sl1 = g.degree_slices()[1]
    knorm = float(np.linalg.norm(c[sl1]))
    if knorm > kernel_tol * max(1.0, float(np.linalg.norm(c))):
        raise SolvabilityError(
            f"right-hand side has kernel component |Pi f| = {knorm:.3e}",
            kernel_norm=knorm)
    lam = g.n - deg * (deg + g.n - 1.0)
    out = np.zeros_like(c)
    mask = deg != 1
    out[mask] = c[mask] / lam[mask]
    return synthesize(g, out)


# ---------------------------------------------------------------------------
# derivatives


def _grad_scatter(basis_d, index_dm1, nmon_dm1):
    """Index maps for coefficient-level differentiation of one degree."""
    m = basis_d.expts.shape[1]
    maps = []
    for i in range(m):
        src = np.nonzero(basis_d.expts[:, i] > 0)[0]
        fac = basis_d.expts[src, i].astype(float)
        dst = np.empty(len(src), dtype=int)
        for j, row in enumerate(src):
            t = basis_d.expts[row].copy()
            t[i] -= 1
            dst[j] = index_dm1[tuple(t)]
        maps.append((src, dst, fac, nmon_dm1))
    return maps


def _ensure_grad_maps(grid):
    if getattr(grid, "_grad_maps", None) is None:
        maps = [None]
        for d in range(1, grid.L + 1):
            maps.append(_grad_scatter(grid.bases[d], grid.bases[d - 1].index,
                                      grid.bases[d - 1].expts.shape[0]))
        grid._grad_maps = maps
    return grid._grad_maps


def _apply_scatter(pc, scatter):
    src, dst, fac, nout = scatter
    out = np.zeros(nout)
    np.add.at(out, dst, pc[src] * fac)
    return out


def ambient_derivatives(fld, want_hessian=True):
    """Value, ambient gradient and (optionally) Hessian of the harmonic
    polynomial extension of a bandlimited field, at the grid nodes."""
    g = fld.grid
    c = fld.coeffs()
    _warn_if_aliased(g, c, "ambient_derivatives")
    maps = _ensure_grad_maps(g)
    N, m = g.num_nodes, g.m
    grad = np.zeros((N, m))
    hess = np.zeros((N, m, m)) if want_hessian else None
    slices = g.degree_slices()
    for d in range(1, g.L + 1):
        cd = c[slices[d]]
        if not np.any(cd):
            continue
        pc = g.bases[d].coeffs @ cd
        pcs = [_apply_scatter(pc, maps[d][i]) for i in range(m)]
        Mdm1 = g.bases[d - 1].mono_values
        for i in range(m):
            grad[:, i] += Mdm1 @ pcs[i]
        if want_hessian and d >= 2:
            Mdm2 = g.bases[d - 2].mono_values
            for i in range(m):
                for j in range(i, m):
                    hij = Mdm2 @ _apply_scatter(pcs[i], maps[d - 1][j])
                    hess[:, i, j] += hij
                    if j > i:
                        hess[:, j, i] += hij
    return grad, hess


def tangential_derivatives(fld):
    """Covariant gradient and Hessian on S^n in the grid's node frames.

    Returns
    -------
    grad : SphereField with values (N, n)
    hess : SphereField with values (N, n, n)
    """
    g = fld.grid
    ga, ha = ambient_derivatives(fld, want_hessian=True)
    fr = g.frames
    grad = np.einsum("nja,na->nj", fr, ga)
    radial = np.einsum("na,na->n", g.nodes, ga)
    hess = np.einsum("nia,nab,njb->nij", fr, ha, fr)
    hess -= radial[:, None, None] * np.eye(g.n)
    return SphereField(g, grad), SphereField(g, hess)


def sphere_gradient(grid, values):
    """Frame components of the surface gradient for stacked scalar fields.

    values: (N,) or (N, C) node values; returns (N, n) or (N, n, C).
    """
    vals = np.asarray(values, dtype=float)
    single = vals.ndim == 1
    if single:
        vals = vals[:, None]
    out = np.empty((grid.num_nodes, grid.n, vals.shape[1]))
    for c in range(vals.shape[1]):
        ga, _ = ambient_derivatives(SphereField(grid, vals[:, c]), want_hessian=False)
        out[:, :, c] = np.einsum("nja,na->nj", grid.frames, ga)
    return out[:, :, 0] if single else out


def sphere_hessian(grid, values):
    """Covariant Hessian frame components of a scalar field."""
    _, hess = tangential_derivatives(SphereField(grid, np.asarray(values, dtype=float)))
    return hess.values


def random_bandlimited(grid, max_degree, rng, scale=1.0, decay=0.5,
                       zero_kernel=False):
    """Seeded random field with coefficients decaying by `decay` per degree."""
    if max_degree > grid.L:
        raise ContractError("max_degree exceeds grid band limit")
    c = np.zeros(grid.num_basis)
    for d, sl in enumerate(grid.degree_slices()):
        if d > max_degree:
            break
        if zero_kernel and d == 1:
            continue
        width = sl.stop - sl.start
        c[sl] = scale * decay ** d * rng.standard_normal(width)
    return synthesize(grid, c)
