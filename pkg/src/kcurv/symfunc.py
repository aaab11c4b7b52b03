"""Elementary symmetric functions of symmetric matrices and Newton transforms.

sigma_k is evaluated through the power-sum trace recursion (Newton's
identities), so no eigendecomposition is required, and the Newton
transforms T_k fall out of the same recursion:

    T_0 = I,   T_k = sigma_k(A) I - A T_{k-1},

with T_n(A) = 0 by Cayley-Hamilton.  All functions accept stacked inputs
with shape (..., n, n) and broadcast over the leading axes.
"""

import numpy as np

from .errors import ContractError

__all__ = [
    "sigma_k",
    "sigma_all",
    "newton_transform",
    "sigma_derivative",
]


def _check_square(A):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ContractError(f"expected square matrices, got shape {A.shape}")
    return A


def sigma_all(A, kmax=None):
    """All elementary symmetric functions sigma_0..sigma_kmax of eigenvalues.

    Parameters
    ----------
    A : (..., n, n) array
        Symmetric matrices (symmetry is not enforced; eigenvalue products
        of the symmetric part are what the caller should mean).
    kmax : int, optional
        Highest order to compute (default n).

    Returns
    -------
    list of arrays, entry k has shape (...,) and holds sigma_k.
    """
    A = _check_square(A)
    n = A.shape[-1]
    if kmax is None:
        kmax = n
    if not 0 <= kmax <= n:
        raise ContractError(f"kmax={kmax} outside 0..{n}")
    # power sums p_j = tr(A^j)
    p = [None]
    P = None
    for _ in range(kmax):
        P = A if P is None else P @ A
        p.append(np.trace(P, axis1=-2, axis2=-1))
    e = [np.ones(A.shape[:-2])]
    for k in range(1, kmax + 1):
        acc = np.zeros(A.shape[:-2])
        for i in range(1, k + 1):
            acc = acc + (-1) ** (i - 1) * e[k - i] * p[i]
        e.append(acc / k)
    return e


def sigma_k(A, k):
    """k-th elementary symmetric polynomial of the eigenvalues of A."""
    A = _check_square(A)
    n = A.shape[-1]
    if not 0 <= k <= n:
        raise ContractError(f"k={k} outside 0..{n}")
    return sigma_all(A, k)[k]


def newton_transform(A, k):
    """k-th Newton transform T_k(A) = sigma_k I - sigma_{k-1} A + ... + (-1)^k A^k."""
    A = _check_square(A)
    n = A.shape[-1]
    if not 0 <= k <= n:
        raise ContractError(f"k={k} outside 0..{n}")
    e = sigma_all(A, k)
    eye = np.broadcast_to(np.eye(n), A.shape).copy()
    T = eye.copy()
    for j in range(1, k + 1):
        T = e[j][..., None, None] * eye - A @ T
    return T


def sigma_derivative(A, Adot, k):
    """Derivative of sigma_k along a matrix path: Tr(T_{k-1}(A) dA/dt)."""
    A = _check_square(A)
    Adot = _check_square(Adot)
    if A.shape != Adot.shape:
        raise ContractError(f"shape mismatch {A.shape} vs {Adot.shape}")
    n = A.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside 1..{n}")
    T = newton_transform(A, k - 1)
    return np.trace(T @ Adot, axis1=-2, axis2=-1)
