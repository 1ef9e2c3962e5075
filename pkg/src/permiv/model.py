"""IV data container, validation, residualization and reduced-form estimation."""
from dataclasses import dataclass

import numpy as np

from permiv.exceptions import (
    DimensionMismatch,
    MissingIntercept,
    RankDeficient,
    SingularCovariance,
)
from permiv.linalg import PD_TOL, RANK_TOL, orthonormal_basis, sym_eig

NULL_FIT_TOL = 1e-13


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a vector or a matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class IVData:
    """
    Observations for ``y = Y theta + X gamma + u`` with instruments ``W``.

    ``X`` must carry the intercept as its first column; nothing is added
    automatically.
    """

    y: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    W: np.ndarray

    @classmethod
    def from_arrays(cls, y, Y, X, W):
        y = np.asarray(y, dtype=float).reshape(-1)
        return cls(y=y, Y=_as_matrix(Y, "Y"), X=_as_matrix(X, "X"), W=_as_matrix(W, "W"))

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def k(self):
        return self.W.shape[1]


@dataclass(frozen=True)
class Residualized:
    """``Z = M_X W``, ``Ytilde = M_X Y`` and ``u_tilde = M_X (y - Y theta0)``."""

    Z: np.ndarray
    Ytilde: np.ndarray
    u_tilde: np.ndarray
    theta0: np.ndarray


@dataclass(frozen=True)
class ReducedForm:
    """Coefficients and residuals of ``Y = Z Gamma + X Xi + V``."""

    Gamma: np.ndarray
    Xi: np.ndarray
    Vhat: np.ndarray
    restricted: bool


def validate(data):
    """
    Check the structural requirements on an :class:`IVData` instance.

    Raises
    ------
    DimensionMismatch
        On inconsistent row counts, ``k < d`` or ``n <= k + p``.
    MissingIntercept
        If the first column of ``X`` is not exactly the ones vector.
    RankDeficient
        If ``X`` or ``[W, X]`` is numerically rank deficient; ``block`` names
        the offending block.
    """
    n = data.y.shape[0]
    for name in ("Y", "X", "W"):
        arr = getattr(data, name)
        if arr.ndim != 2 or arr.shape[0] != n:
            raise DimensionMismatch(f"{name} must have {n} rows, got shape {arr.shape}")
    if not all(np.all(np.isfinite(getattr(data, nm))) for nm in ("y", "Y", "X", "W")):
        raise DimensionMismatch("data contain non-finite values")
    if data.d < 1 or data.k < 1 or data.p < 1:
        raise DimensionMismatch("need at least one endogenous regressor, instrument and exogenous column")
    if data.k < data.d:
        raise DimensionMismatch(f"need k >= d instruments, got k={data.k}, d={data.d}")
    if n <= data.k + data.p:
        raise DimensionMismatch(f"need n > k + p, got n={n}, k={data.k}, p={data.p}")
    if not np.all(data.X[:, 0] == 1.0):
        raise MissingIntercept("first column of X must be the ones vector")
    orthonormal_basis(data.X, name="X")
    orthonormal_basis(np.hstack([data.W, data.X]), name="[W, X]")
    return data


def residualize(data, theta0):
    """Partial the exogenous covariates out of ``W``, ``Y`` and ``y - Y theta0``."""
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    if theta0.shape != (data.d,):
        raise DimensionMismatch(f"theta0 must have length {data.d}, got {theta0.shape}")
    Q = orthonormal_basis(data.X, name="X")
    r = data.y - data.Y @ theta0
    block = np.column_stack([data.W, data.Y, r])
    tilde = block - Q @ (Q.T @ block)
    k, d = data.k, data.d
    u_tilde = tilde[:, k + d]
    # y - Y theta0 lying in span(X) up to rounding counts as an exact null fit
    scale = np.linalg.norm(data.y) + np.linalg.norm(data.Y @ theta0)
    if np.linalg.norm(u_tilde) <= NULL_FIT_TOL * scale:
        u_tilde = np.zeros_like(u_tilde)
    return Residualized(Z=tilde[:, :k], Ytilde=tilde[:, k : k + d], u_tilde=u_tilde, theta0=theta0)


def _ols(design, target):
    Q, R = np.linalg.qr(design)
    if design.shape[1] and np.min(np.abs(np.diag(R))) < RANK_TOL * np.max(np.abs(np.diag(R))):
        raise RankDeficient("regression design is rank deficient", block="design")
    return np.linalg.solve(R, Q.T @ target)


def reduced_form(data, theta0=None, res=None):
    """
    Reduced-form coefficients of ``Y`` on ``Z = M_X W`` and ``X``.

    With ``theta0=None`` this is plain OLS. Otherwise the instrument
    coefficients are the null-restricted estimates
    ``(Z'Z)^{-1} Z'Y_s - (Z'Z)^{-1} C_s Sigma^{-1} Z'(y - Y theta0)``.
    Because ``Z'X = 0`` the restriction leaves the ``X`` block untouched, so
    ``Xi`` is ``(X'X)^{-1} X'Y`` in both modes.
    """
    if res is None:
        res = residualize(data, np.zeros(data.d) if theta0 is None else theta0)
    Z = res.Z
    Gamma = _ols(Z, data.Y)
    Xi = _ols(data.X, data.Y)
    restricted = theta0 is not None
    if restricted:
        if not np.allclose(res.theta0, np.atleast_1d(theta0)):
            raise ValueError("res was residualized at a different theta0")
        n = data.n
        u = res.u_tilde
        Sigma = (Z * u[:, None] ** 2).T @ Z / n
        lam = sym_eig(Sigma).eigenvalues
        if lam[0] <= 0 or lam[-1] <= PD_TOL * lam[0]:
            raise SingularCovariance("Sigma_hat(theta0) is not positive definite")
        Zu = Z.T @ u
        ZZ = Z.T @ Z
        correction = np.empty_like(Gamma)
        for s in range(data.d):
            C_s = (Z * (res.Ytilde[:, s] * u)[:, None]).T @ Z / n
            correction[:, s] = np.linalg.solve(ZZ, C_s @ np.linalg.solve(Sigma, Zu))
        Gamma = Gamma - correction
    Vhat = data.Y - Z @ Gamma - data.X @ Xi
    return ReducedForm(Gamma=Gamma, Xi=Xi, Vhat=Vhat, restricted=restricted)
