"""
Dense symmetric linear-algebra kernels.

Every spectral quantity in the package (square roots, inverse square roots,
smallest eigenvalues, eigenvalue adjustment) goes through :func:`sym_eig`, so
there is a single well-tested backend.
"""
from dataclasses import dataclass

import numpy as np

from permiv.exceptions import (
    NotPositiveDefinite,
    NotSymmetric,
    RankDeficient,
    ZeroMatrix,
)

RANK_TOL = 1e-10
PD_TOL = 1e-12
SYM_TOL = 1e-10
TIE_TOL = 1e-12


@dataclass(frozen=True)
class SymEig:
    """Eigenvalues in descending order with matching orthonormal eigenvectors."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        N = self.eigenvectors
        return (N * self.eigenvalues) @ N.T


def _check_symmetric(A, tol=SYM_TOL):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise NotSymmetric(f"expected a square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), 1.0) if A.size else 1.0
    if np.max(np.abs(A - np.swapaxes(A, -1, -2)), initial=0.0) > tol * scale:
        raise NotSymmetric("matrix is not symmetric")
    return A


def sym_eig(A):
    """
    Symmetric eigendecomposition with eigenvalues sorted in descending order.

    Eigenvalues closer than ``1e-12 * |lambda_1|`` are treated as tied; their
    relative order is whatever the underlying LAPACK routine returns.

    Parameters
    ----------
    A : np.ndarray of shape (p, p)
        Symmetric matrix.

    Returns
    -------
    SymEig
    """
    A = _check_symmetric(A)
    A = 0.5 * (A + A.T)
    lam, N = np.linalg.eigh(A)
    return SymEig(eigenvalues=lam[::-1].copy(), eigenvectors=N[:, ::-1].copy())


def orthonormal_basis(basis, name="basis"):
    """
    Orthonormal basis of the column space of a full-column-rank matrix.

    Raises
    ------
    RankDeficient
        If the smallest singular value is below ``1e-10`` times the largest.
    """
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        basis = basis[:, None]
    n, m = basis.shape
    if m == 0:
        return np.zeros((n, 0))
    if n < m:
        raise RankDeficient(f"{name} has more columns ({m}) than rows ({n})", block=name)
    sv = np.linalg.svd(basis, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] < RANK_TOL * sv[0]:
        raise RankDeficient(f"{name} is numerically rank deficient", block=name)
    Q, _ = np.linalg.qr(basis)
    return Q


def annihilate(basis, target):
    """
    Apply the annihilator ``M_A = I - A (A'A)^{-1} A'`` of ``basis`` to ``target``.

    Parameters
    ----------
    basis : np.ndarray of shape (n, m)
        Full-column-rank matrix ``A``.
    target : np.ndarray of shape (n,) or (n, q)

    Returns
    -------
    np.ndarray
        ``M_A @ target`` with the same shape as ``target``.
    """
    Q = orthonormal_basis(basis)
    target = np.asarray(target, dtype=float)
    return target - Q @ (Q.T @ target)


def eigen_adjust(A, eps):
    """
    Floor the eigenvalues of a nonzero PSD matrix at ``eps`` times the largest.

    The result shares the eigenvectors of ``A`` and has eigenvalues
    ``max(lambda_i, eps * lambda_1)``.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    A = _check_symmetric(A)
    if np.all(np.abs(A) < 1e-14):
        raise ZeroMatrix("eigenvalue adjustment needs a nonzero matrix")
    eig = sym_eig(A)
    lam = eig.eigenvalues
    floored = np.maximum(lam, eps * lam[0])
    N = eig.eigenvectors
    out = (N * floored) @ N.T
    return 0.5 * (out + out.T)


def sym_sqrt(A):
    """Symmetric PSD square root; tiny negative eigenvalues are clipped to 0."""
    eig = sym_eig(A)
    N = eig.eigenvectors
    out = (N * np.sqrt(np.clip(eig.eigenvalues, 0.0, None))) @ N.T
    return 0.5 * (out + out.T)


def sym_inv_sqrt(A):
    """
    Unique symmetric positive-definite inverse square root of an SPD matrix.

    Raises
    ------
    NotPositiveDefinite
        If the smallest eigenvalue is not above ``1e-12`` times the largest.
    """
    eig = sym_eig(A)
    lam = eig.eigenvalues
    if lam[0] <= 0 or lam[-1] <= PD_TOL * lam[0]:
        raise NotPositiveDefinite("matrix is not numerically positive definite")
    N = eig.eigenvectors
    out = (N / np.sqrt(lam)) @ N.T
    return 0.5 * (out + out.T)


def min_eig(A):
    """
    Smallest eigenvalue of a symmetric matrix, or of each matrix in a stack.

    1x1 and 2x2 inputs use the closed form; larger ones use ``eigvalsh``.
    """
    A = _check_symmetric(A)
    m = A.shape[-1]
    if m == 1:
        out = A[..., 0, 0].copy()
    elif m == 2:
        a, b, c = A[..., 0, 0], 0.5 * (A[..., 0, 1] + A[..., 1, 0]), A[..., 1, 1]
        half_tr = 0.5 * (a + c)
        out = half_tr - np.hypot(0.5 * (a - c), b)
    else:
        out = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def batch_whiten(S, tol=PD_TOL):
    """
    Inverse square roots of a stack of symmetric matrices.

    Returns ``(inv_sqrt, ok)`` where ``ok`` marks the matrices that pass the
    positive-definiteness threshold; failing entries are filled with NaN.
    """
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    lam, N = np.linalg.eigh(S)
    top = lam[..., -1]
    ok = np.isfinite(top) & (top > 0) & (lam[..., 0] > tol * top)
    safe = np.where(ok[..., None], lam, 1.0)
    inv_sqrt = (N / np.sqrt(safe)[..., None, :]) @ np.swapaxes(N, -1, -2)
    inv_sqrt[~ok] = np.nan
    return inv_sqrt, ok
