"""
Null-dependent moment ingredients and the asymptotic AR, LM and CLR statistics.

All quantities are evaluated at a hypothesised ``theta0`` from the output of
:func:`permiv.model.residualize`.
"""
from dataclasses import dataclass

import numpy as np

from permiv.exceptions import (
    NotPositiveDefinite,
    RankDeficientJacobian,
    SingularCovariance,
    SingularOmega,
)
from permiv.linalg import PD_TOL, RANK_TOL, eigen_adjust, min_eig, sym_eig, sym_inv_sqrt, sym_sqrt

DEFAULT_EPS = 0.01


@dataclass(frozen=True)
class MomentSet:
    n: int
    m_hat: np.ndarray
    Sigma_hat: np.ndarray
    C_hat: tuple
    G_hat: np.ndarray
    J_hat: np.ndarray
    SigmaG_hat: np.ndarray
    V_a: np.ndarray
    V_b: np.ndarray
    Omega_a: np.ndarray
    Omega_b: np.ndarray
    Sigma_inv_sqrt: np.ndarray
    S_hat: np.ndarray
    T_a: np.ndarray
    T_b: np.ndarray
    eps_adjust: float


def weighted_gram(Z, w):
    """``n^{-1} sum_i w_i Z_i Z_i'``."""
    return (Z * w[:, None]).T @ Z / Z.shape[0]


def check_covariance(Sigma):
    lam = sym_eig(Sigma).eigenvalues
    if not np.all(np.isfinite(lam)) or lam[0] <= 0 or lam[-1] <= PD_TOL * lam[0]:
        raise SingularCovariance("Sigma_hat(theta0) is not positive definite")


def kron_transform(theta0, k):
    """``B(theta0) kron I_k`` with ``B = [[1, 0], [-theta0, -I_d]]``."""
    d = theta0.shape[0]
    B = np.zeros((d + 1, d + 1))
    B[0, 0] = 1.0
    B[1:, 0] = -theta0
    B[1:, 1:] = -np.eye(d)
    return np.kron(B, np.eye(k))


def omega(Sigma, V, theta0):
    """``(d+1) x (d+1)`` matrix with entries ``tr(K_ij' Sigma^{-1}) / k``."""
    k = Sigma.shape[0]
    d1 = V.shape[0] // k
    Bk = kron_transform(theta0, k)
    K = Bk.T @ V @ Bk
    Sigma_inv = np.linalg.inv(Sigma)
    blocks = K.reshape(d1, k, d1, k)
    # tr(K_ij' A) = sum_ab K_ij[a, b] A[a, b]
    out = np.einsum("iajb,ab->ij", blocks, Sigma_inv) / k
    return 0.5 * (out + out.T)


def conditioning_matrix(Sigma_inv_sqrt, J, Omega, theta0, eps, n):
    """``Sigma^{-1/2} n^{1/2} J ((theta0, I) Omega^eps^{-1} (theta0, I)')^{1/2}``."""
    Om = eigen_adjust(Omega, eps)
    lam = sym_eig(Om).eigenvalues
    if lam[-1] <= PD_TOL * lam[0]:
        raise SingularOmega("eigenvalue-adjusted Omega is not positive definite")
    d = theta0.shape[0]
    L = np.hstack([theta0[:, None], np.eye(d)])
    middle = L @ np.linalg.solve(Om, L.T)
    return np.sqrt(n) * Sigma_inv_sqrt @ J @ sym_sqrt(middle)


def moments(res, eps=DEFAULT_EPS):
    """
    Compute every ``theta0``-dependent statistic ingredient.

    Parameters
    ----------
    res : Residualized
        Output of :func:`permiv.model.residualize`.
    eps : float, default=0.01
        Eigenvalue-adjustment constant applied to ``Omega`` before inversion.

    Returns
    -------
    MomentSet

    Raises
    ------
    SingularCovariance
        If ``Sigma_hat(theta0)`` is not positive definite.
    SingularOmega
        If the adjusted ``Omega`` is singular (possible only with ``eps = 0``).
    """
    Z, Yt, u, theta0 = res.Z, res.Ytilde, res.u_tilde, res.theta0
    n, k = Z.shape
    d = Yt.shape[1]

    m_hat = Z.T @ u / n
    Sigma = weighted_gram(Z, u**2)
    if not np.all(np.isfinite(Sigma)):
        Sigma = _extended_gram(Z, u**2)
    check_covariance(Sigma)
    C = tuple(weighted_gram(Z, Yt[:, s] * u) for s in range(d))
    G = Z.T @ Yt / n
    Sigma_inv_m = np.linalg.solve(Sigma, m_hat)
    J = G - np.column_stack([C_s @ Sigma_inv_m for C_s in C])

    SigmaG = np.empty((k * d, k * d))
    for s in range(d):
        for t in range(s, d):
            blk = weighted_gram(Z, Yt[:, s] * Yt[:, t]) - np.outer(G[:, s], G[:, t])
            SigmaG[s * k : (s + 1) * k, t * k : (t + 1) * k] = blk
            SigmaG[t * k : (t + 1) * k, s * k : (s + 1) * k] = blk.T
    C_row = np.hstack(C)
    V_a = np.block([[Sigma, C_row], [C_row.T, SigmaG]])

    eps_mat = np.column_stack([u, -Yt])
    coef, *_ = np.linalg.lstsq(Z, eps_mat, rcond=None)
    e = eps_mat - Z @ coef
    V_b = np.empty((k * (d + 1), k * (d + 1)))
    for a in range(d + 1):
        for b in range(a, d + 1):
            blk = weighted_gram(Z, e[:, a] * e[:, b])
            V_b[a * k : (a + 1) * k, b * k : (b + 1) * k] = blk
            V_b[b * k : (b + 1) * k, a * k : (a + 1) * k] = blk

    try:
        Sigma_is = sym_inv_sqrt(Sigma)
    except NotPositiveDefinite as exc:
        raise SingularCovariance(str(exc)) from exc
    Omega_a = omega(Sigma, V_a, theta0)
    Omega_b = omega(Sigma, V_b, theta0)
    return MomentSet(
        n=n,
        m_hat=m_hat,
        Sigma_hat=Sigma,
        C_hat=C,
        G_hat=G,
        J_hat=J,
        SigmaG_hat=SigmaG,
        V_a=V_a,
        V_b=V_b,
        Omega_a=Omega_a,
        Omega_b=Omega_b,
        Sigma_inv_sqrt=Sigma_is,
        S_hat=np.sqrt(n) * Sigma_is @ m_hat,
        T_a=conditioning_matrix(Sigma_is, J, Omega_a, theta0, eps, n),
        T_b=conditioning_matrix(Sigma_is, J, Omega_b, theta0, eps, n),
        eps_adjust=eps,
    )


def _extended_gram(Z, w):
    # heavy-tailed draws can overflow the float64 accumulation
    Zl = Z.astype(np.longdouble)
    out = (Zl * w.astype(np.longdouble)[:, None]).T @ Zl / Z.shape[0]
    return np.asarray(out, dtype=float)


def ar_stat(ms, n=None):
    """Heteroskedasticity-robust AR statistic ``n m' Sigma^{-1} m``."""
    n = ms.n if n is None else n
    check_covariance(ms.Sigma_hat)
    return float(n * ms.m_hat @ np.linalg.solve(ms.Sigma_hat, ms.m_hat))


def lm_stat(ms, n=None):
    """
    Kleibergen-type LM statistic: the squared norm of the whitened moment
    vector projected onto the whitened Jacobian ``Sigma^{-1/2} J``.
    """
    n = ms.n if n is None else n
    check_covariance(ms.Sigma_hat)
    A = ms.Sigma_inv_sqrt @ ms.J_hat
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0 or sv[-1] < RANK_TOL * sv[0]:
        raise RankDeficientJacobian("whitened Jacobian estimate is rank deficient")
    s = np.sqrt(n) * ms.Sigma_inv_sqrt @ ms.m_hat
    Q, _ = np.linalg.qr(A)
    proj = Q.T @ s
    return float(proj @ proj)


def clr_stat(S, T):
    """
    ``S'S - lambda_min[(S, T)'(S, T)]``.

    ``S`` may be a single k-vector or a stack of shape ``(B, k)``; ``T`` is a
    ``k x d`` matrix (shared) or a stack of shape ``(B, k, d)``. The result is
    clipped to ``[0, S'S]``, the range it occupies in exact arithmetic.
    """
    S = np.asarray(S, dtype=float)
    T = np.asarray(T, dtype=float)
    single = S.ndim == 1
    S2 = S[None, :] if single else S
    if T.ndim == 2:
        T = np.broadcast_to(T, (S2.shape[0],) + T.shape)
    M = np.concatenate([S2[:, :, None], T], axis=2)
    gram = np.swapaxes(M, 1, 2) @ M
    ss = np.einsum("bk,bk->b", S2, S2)
    out = np.clip(ss - min_eig(gram), 0.0, ss)
    return float(out[0]) if single else out


def clr_reference(T, draws=10_000, seed=None):
    """Sorted draws of ``clr_stat(z, T)`` with ``z`` standard k-variate normal."""
    if draws < 1000:
        raise ValueError("clr_reference needs at least 1000 draws")
    T = np.asarray(T, dtype=float)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((draws, T.shape[0]))
    return np.sort(clr_stat(z, T))


def clr_critical_value(T, alpha=0.05, draws=10_000, seed=None):
    """
    Conditional ``1 - alpha`` critical value of the CLR statistic given ``T``.

    Plain Monte Carlo over standard normal ``z``; deterministic for a fixed
    ``seed``.
    """
    ref = clr_reference(T, draws=draws, seed=seed)
    return float(np.quantile(ref, 1.0 - alpha, method="inverted_cdf"))
