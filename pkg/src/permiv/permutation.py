"""
Permutation streams, the randomized level-alpha decision rule, and exact
permutation moments used as oracles.
"""
import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from permiv.exceptions import CapExceeded, ConfigError

EXHAUSTIVE = "exhaustive"
MONTE_CARLO = "mc"


@dataclass(frozen=True)
class PermutationPlan:
    """
    How to build a permutation reference set.

    ``mode="exhaustive"`` enumerates all ``n!`` permutations (identity
    included); ``mode="mc"`` draws ``n_perm`` i.i.d. uniform permutations from
    a generator seeded with ``seed``.
    """

    mode: str = MONTE_CARLO
    n_perm: int = 999
    seed: Optional[int] = None
    exhaustive_cap: int = 8

    def __post_init__(self):
        if self.mode not in (EXHAUSTIVE, MONTE_CARLO):
            raise ConfigError(f"unknown permutation mode {self.mode!r}; use 'exhaustive' or 'mc'")
        if self.mode == MONTE_CARLO and self.n_perm < 1:
            raise ConfigError("n_perm must be at least 1")

    @property
    def exhaustive(self):
        return self.mode == EXHAUSTIVE

    def with_seed(self, seed):
        return PermutationPlan(self.mode, self.n_perm, seed, self.exhaustive_cap)

    def size(self, n):
        return math.factorial(n) if self.exhaustive else self.n_perm


def permutation_matrix(plan, n):
    """All permutations of the plan as rows of an ``(B, n)`` integer array."""
    if plan.exhaustive:
        if n > plan.exhaustive_cap:
            raise CapExceeded(f"exhaustive enumeration capped at n={plan.exhaustive_cap}, got n={n}")
        return np.array(list(itertools.permutations(range(n))), dtype=np.intp).reshape(-1, n)
    rng = np.random.default_rng(plan.seed)
    base = np.broadcast_to(np.arange(n, dtype=np.intp), (plan.n_perm, n))
    # Generator.permuted shuffles each row independently with Fisher-Yates
    return rng.permuted(base, axis=1)


def permutation_stream(plan, n):
    """Yield permutations of ``range(n)`` one at a time (lexicographic when exhaustive)."""
    if plan.exhaustive:
        if n > plan.exhaustive_cap:
            raise CapExceeded(f"exhaustive enumeration capped at n={plan.exhaustive_cap}, got n={n}")
        for perm in itertools.permutations(range(n)):
            yield np.array(perm, dtype=np.intp)
        return
    yield from permutation_matrix(plan, n)


@dataclass(frozen=True)
class RandomizationOutcome:
    R_obs: float
    ref_set: np.ndarray
    r: int
    N_plus: int
    N_zero: int
    a: float
    phi: float
    p_value: float
    reject_at: Optional[bool] = None

    @property
    def critical_value(self):
        return float(self.ref_set[self.r - 1])


def _floor_product(m, alpha):
    x = m * alpha
    f = math.floor(x)
    # guard against m * alpha landing a hair below an integer
    if x - f > 1.0 - 1e-9 * max(1.0, x):
        f += 1
    return f


def randomization_decision(R_obs, ref, alpha, includes_observed=False, u=None):
    """
    Randomized permutation test of level ``alpha``.

    Parameters
    ----------
    R_obs : float
        Observed statistic.
    ref : array_like
        Permutation reference values.
    alpha : float
        Nominal level in (0, 1).
    includes_observed : bool, default=False
        Whether ``ref`` already contains the observed statistic (true for
        exhaustive enumeration, which includes the identity). Only affects
        the p-value convention.
    u : float, optional
        External uniform draw; if given, ``reject_at = u < phi``.

    Returns
    -------
    RandomizationOutcome
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    ref = np.sort(np.asarray(ref, dtype=float))
    m = ref.size
    if m == 0:
        raise ValueError("reference set is empty")
    r = m - _floor_product(m, alpha)
    crit = ref[r - 1]
    N_plus = int(np.count_nonzero(ref > crit))
    N_zero = int(np.count_nonzero(ref == crit))
    a = (m * alpha - N_plus) / N_zero
    if R_obs > crit:
        phi = 1.0
    elif R_obs == crit:
        phi = a
    else:
        phi = 0.0
    n_ge = int(np.count_nonzero(ref >= R_obs))
    p_value = n_ge / m if includes_observed else (1 + n_ge) / (m + 1)
    reject_at = None if u is None else bool(u < phi)
    return RandomizationOutcome(
        R_obs=float(R_obs),
        ref_set=ref,
        r=int(r),
        N_plus=N_plus,
        N_zero=N_zero,
        a=float(a),
        phi=float(phi),
        p_value=float(p_value),
        reject_at=reject_at,
    )


def perm_moment_oracle(Z, u2):
    """
    Exact permutation mean and entrywise variance of
    ``n^{-1} sum_i Z_i Z_i' u2[pi(i)]`` under a uniform random permutation.

    Returns
    -------
    mean : np.ndarray of shape (k, k)
    var : np.ndarray of shape (k, k)
    """
    Z = np.asarray(Z, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    n = Z.shape[0]
    if n < 2:
        raise ValueError("need n >= 2")
    ZZ = Z.T @ Z / n
    mean = ZZ * u2.mean()
    Z22 = (Z**2).T @ (Z**2) / n
    var = (Z22 - ZZ**2) * (np.mean(u2**2) - u2.mean() ** 2) / (n - 1)
    return mean, var


def hoeffding_variance(c):
    """
    Exact mean and variance of ``sum_i c[i, pi(i)]`` under a uniform random
    permutation (Hoeffding's combinatorial formulas).

    Returns
    -------
    mean : float
    var : float
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    if c.shape != (n, n) or n < 2:
        raise ValueError("c must be a square matrix with n >= 2")
    g = c - c.mean(axis=0, keepdims=True) - c.mean(axis=1, keepdims=True) + c.mean()
    return float(c.sum() / n), float((g**2).sum() / (n - 1))
