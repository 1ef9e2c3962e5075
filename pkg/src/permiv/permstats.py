"""
Permutation versions of the AR, LM and CLR statistics.

:class:`PermContext` caches everything that depends only on ``(data, theta0)``
and evaluates a statistic for a whole batch of permutations at once. Batch
methods take an integer array of shape ``(B, n)`` (one permutation per row)
and return a length-``B`` float array; draws whose permuted covariance
estimate is singular come back as NaN so callers can drop them.
"""
from functools import cached_property

import numpy as np

from permiv.exceptions import NotScalarInstrument, RankDeficientJacobian, SingularCovariance
from permiv.kernels import DEFAULT_EPS, clr_stat, moments
from permiv.linalg import RANK_TOL, batch_whiten, orthonormal_basis
from permiv.model import reduced_form, residualize

UNRESTRICTED = "unrestricted"
RESTRICTED = "restricted"


def _as_batch(perms, n):
    perms = np.asarray(perms, dtype=np.intp)
    if perms.ndim == 1:
        perms = perms[None, :]
    if perms.shape[1] != n:
        raise ValueError(f"permutations must have length {n}, got {perms.shape[1]}")
    return perms


class PermContext:
    """
    Per-dataset cache for permutation statistics at a fixed ``theta0``.

    Parameters
    ----------
    data : IVData
        Validated data.
    theta0 : array_like of shape (d,)
    eps : float, default=0.01
        Eigenvalue adjustment used for the CLR conditioning matrices.
    """

    def __init__(self, data, theta0, eps=DEFAULT_EPS):
        self.data = data
        self.eps = eps
        self.res = residualize(data, theta0)
        self.theta0 = self.res.theta0
        self.Z = self.res.Z
        self.u = self.res.u_tilde
        self.n, self.k = self.Z.shape
        self.d = data.d
        self.last_rank_failures = 0
        # row-wise outer products Z_i Z_i', flattened for batched weighted Grams
        self._ZZ = np.einsum("ik,il->ikl", self.Z, self.Z).reshape(self.n, self.k * self.k)

    @cached_property
    def moments(self):
        return moments(self.res, eps=self.eps)

    @cached_property
    def _QX(self):
        return orthonormal_basis(self.data.X, name="X")

    def reduced_form(self, variant=UNRESTRICTED):
        if variant == UNRESTRICTED:
            return self._rf_unrestricted
        if variant == RESTRICTED:
            return self._rf_restricted
        raise ValueError(f"unknown reduced-form variant {variant!r}")

    @cached_property
    def _rf_unrestricted(self):
        return reduced_form(self.data, res=self.res)

    @cached_property
    def _rf_restricted(self):
        return reduced_form(self.data, theta0=self.theta0, res=self.res)

    def _weighted_grams(self, w):
        B = w.shape[0]
        return (w @ self._ZZ / self.n).reshape(B, self.k, self.k)

    def _whitened_moments(self, perms):
        up = self.u[perms]
        m = up @ self.Z / self.n
        Sig = self._weighted_grams(up**2)
        Sig_is, ok = batch_whiten(Sig)
        s = np.sqrt(self.n) * np.einsum("bkl,bl->bk", Sig_is, m)
        return up, m, Sig, Sig_is, s, ok

    def par1(self, perms):
        """``AR(W_pi, X, u_tilde)``: permute the instrument rows."""
        perms = _as_batch(perms, self.n)
        Wp = self.data.W[perms]
        Q = self._QX
        Zp = Wp - np.einsum("ip,bpk->bik", Q, np.einsum("ip,bik->bpk", Q, Wp))
        a = np.einsum("bik,i->bk", Zp, self.u)
        S = np.einsum("bik,i,bil->bkl", Zp, self.u**2, Zp)
        S_is, ok = batch_whiten(S)
        w = np.einsum("bkl,bl->bk", S_is, a)
        out = np.einsum("bk,bk->b", w, w)
        out[~ok] = np.nan
        return out

    def par2(self, perms):
        """``AR(W, X, u_tilde_pi)``: permute the null-restricted residuals."""
        perms = _as_batch(perms, self.n)
        *_, s, ok = self._whitened_moments(perms)
        out = np.einsum("bk,bk->b", s, s)
        out[~ok] = np.nan
        return out

    def plm(self, perms, variant=UNRESTRICTED):
        """
        Permutation LM statistic with Freedman-Lane permuted reduced-form
        residuals (``variant="restricted"`` permutes the null-restricted ones).
        """
        perms = _as_batch(perms, self.n)
        rf = self.reduced_form(variant)
        up, m, Sig, Sig_is, s, ok = self._whitened_moments(perms)
        Vp = rf.Vhat[perms]
        fitted = self.Z.T @ (self.Z @ rf.Gamma + self.data.X @ rf.Xi) / self.n
        ZtYp = fitted[None] + np.einsum("ik,bid->bkd", self.Z, Vp) / self.n
        safe_Sig = np.where(ok[:, None, None], Sig, np.eye(self.k))
        Sig_inv_m = np.linalg.solve(safe_Sig, m[..., None])[..., 0]
        J = np.empty_like(ZtYp)
        for t in range(self.d):
            C_t = self._weighted_grams(Vp[:, :, t] * up)
            J[:, :, t] = ZtYp[:, :, t] - np.einsum("bkl,bl->bk", C_t, Sig_inv_m)
        A = Sig_is @ J
        A[~ok] = 0.0
        sv = np.linalg.svd(A, compute_uv=False)
        full_rank = ok & (sv[:, 0] > 0) & (sv[:, -1] >= RANK_TOL * sv[:, 0])
        Q, _ = np.linalg.qr(np.where(full_rank[:, None, None], A, np.eye(self.k, self.d)))
        proj = np.einsum("bkd,bk->bd", Q, np.where(full_rank[:, None], s, 0.0))
        out = np.einsum("bd,bd->b", proj, proj)
        out[~full_rank] = np.nan
        self.last_rank_failures = int(np.count_nonzero(ok & ~full_rank))
        return out

    def pclr(self, perms, which="a"):
        """``CLR(S_pi, T)`` with ``T`` fixed at the sample conditioning matrix."""
        perms = _as_batch(perms, self.n)
        T = self.conditioning(which)
        *_, s, ok = self._whitened_moments(perms)
        out = clr_stat(np.where(ok[:, None], s, 0.0), T)
        out[~ok] = np.nan
        return out

    def pns(self, perms):
        """Non-studentized ``W' M_X u_tilde_pi`` (single instrument only)."""
        if self.k != 1:
            raise NotScalarInstrument(f"PNS needs exactly one instrument, got k={self.k}")
        perms = _as_batch(perms, self.n)
        return self.u[perms] @ self.Z[:, 0]

    def conditioning(self, which):
        ms = self.moments
        if which == "a":
            return ms.T_a
        if which == "b":
            return ms.T_b
        raise ValueError(f"which must be 'a' or 'b', got {which!r}")

    def batch(self, name, perms, plm_variant=UNRESTRICTED):
        """Dispatch by statistic name (``PAR1``, ``PAR2``, ``PLM``, ``PCLRa``, ``PCLRb``, ``PNS``)."""
        key = name.upper()
        if key == "PAR1":
            return self.par1(perms)
        if key == "PAR2":
            return self.par2(perms)
        if key == "PLM":
            return self.plm(perms, plm_variant)
        if key == "PCLRA":
            return self.pclr(perms, "a")
        if key == "PCLRB":
            return self.pclr(perms, "b")
        if key == "PNS":
            return self.pns(perms)
        raise ValueError(f"unknown permutation statistic {name!r}")


def _scalar(context, name, pi, **kwargs):
    value = context.batch(name, pi, **kwargs)[0]
    if np.isnan(value):
        if name.upper() == "PLM" and context.last_rank_failures:
            raise RankDeficientJacobian("permuted Jacobian estimate is rank deficient")
        raise SingularCovariance("permuted covariance estimate is not positive definite")
    return float(value)


def par1(data, theta0, pi):
    return _scalar(PermContext(data, theta0), "PAR1", pi)


def par2(data, theta0, pi):
    return _scalar(PermContext(data, theta0), "PAR2", pi)


def plm(data, theta0, pi, variant=UNRESTRICTED):
    return _scalar(PermContext(data, theta0), "PLM", pi, plm_variant=variant)


def pclr(data, theta0, pi, which="a", eps=DEFAULT_EPS):
    return _scalar(PermContext(data, theta0, eps=eps), "PCLR" + which, pi)


def pns(data, theta0, pi):
    return _scalar(PermContext(data, theta0), "PNS", pi)
