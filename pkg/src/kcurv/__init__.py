"""Constant k-curvature hypersurfaces near scalar-curvature critical points.

Subpackages: `manifold` (ambient metric, curvature, exponential map),
`sphere` (quadrature and spectral calculus on S^n), `symfunc` (elementary
symmetric functions and Newton transforms), `graphgeom` (exact geometry of
perturbed geodesic spheres), `solver` (two-tier leaf/center solves and the
foliation sweep), `verify` (numerical checks of every expansion used),
`cli` (batch entry point).
"""

from . import errors, graphgeom, manifold, solver, sphere, symfunc, verify

__all__ = ["errors", "graphgeom", "manifold", "solver", "sphere", "symfunc",
           "verify"]
__version__ = "0.1.0"
