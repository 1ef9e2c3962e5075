"""
Hypothesis tests, confidence sets by test inversion, and first-stage /
heteroskedasticity diagnostics.
"""
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from permiv.exceptions import (
    DimensionMismatch,
    EmptyGrid,
    SingularCovariance,
    TooFewDraws,
)
from permiv.kernels import DEFAULT_EPS, ar_stat, clr_reference, clr_stat, lm_stat, weighted_gram
from permiv.linalg import orthonormal_basis
from permiv.model import residualize, validate
from permiv.permstats import UNRESTRICTED, PermContext
from permiv.permutation import PermutationPlan, permutation_matrix, randomization_decision

PERMUTATION_TESTS = ("PAR1", "PAR2", "PLM", "PCLRa", "PCLRb", "PNS")
ASYMPTOTIC_TESTS = ("AR", "LM", "CLRa", "CLRb")
ALL_TESTS = ASYMPTOTIC_TESTS + PERMUTATION_TESTS
MAX_DROPPED_FRACTION = 0.2

_CANONICAL = {name.upper(): name for name in ALL_TESTS}


def canonical_name(name):
    try:
        return _CANONICAL[name.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown statistic {name!r}; choose from {', '.join(ALL_TESTS)}") from None


def derive_seed(*parts):
    """Deterministic 63-bit seed from integer parts (None propagates)."""
    if any(p is None for p in parts):
        return None
    words = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return int((int(words[0]) << 31) ^ int(words[1]))


@dataclass
class TestResult:
    statistic_name: str
    R_obs: float
    p_value: float
    reject: bool
    alpha: float
    outcome: Optional[object] = None
    critical_value: Optional[float] = None
    n_perm: Optional[int] = None
    dropped: int = 0
    sigma_condition: Optional[float] = None
    seed: Optional[int] = None

    __test__ = False

    def as_dict(self):
        return {
            "statistic": self.statistic_name,
            "value": self.R_obs,
            "p_value": self.p_value,
            "reject": self.reject,
            "n_perm": self.n_perm,
            "dropped": self.dropped,
        }


def _pns_decision(R_obs, ref, tails, includes_observed):
    lo, hi = tails
    m = ref.size
    n_le = np.count_nonzero(ref <= R_obs)
    n_ge = np.count_nonzero(ref >= R_obs)
    if includes_observed:
        p_lo, p_hi = n_le / m, n_ge / m
    else:
        p_lo, p_hi = (1 + n_le) / (m + 1), (1 + n_ge) / (m + 1)
    reject = bool(p_lo <= lo or p_hi <= 1.0 - hi)
    return min(1.0, 2.0 * min(p_lo, p_hi)), reject


def run_tests(
    data,
    theta0,
    names,
    plan=None,
    alpha=0.05,
    eps=DEFAULT_EPS,
    plm_variant=UNRESTRICTED,
    pns_tails=None,
    clr_draws=10_000,
    context=None,
    perms=None,
    check=True,
):
    """
    Run several tests on the same data, sharing one permutation reference draw.

    Parameters
    ----------
    data : IVData
    theta0 : array_like of shape (d,)
    names : sequence of str
        Any of ``AR, LM, CLRa, CLRb, PAR1, PAR2, PLM, PCLRa, PCLRb, PNS``.
    plan : PermutationPlan, optional
        Defaults to 999 Monte Carlo draws without a fixed seed.
    alpha : float, default=0.05
    eps : float, default=0.01
        Eigenvalue adjustment for the CLR conditioning matrices.
    plm_variant : {"unrestricted", "restricted"}
    pns_tails : tuple of float, optional
        Lower and upper tail probabilities for PNS; defaults to
        ``(alpha / 2, 1 - alpha / 2)``.
    clr_draws : int, default=10000
        Normal draws used for the conditional critical value of CLR_a/CLR_b.

    Returns
    -------
    dict mapping canonical name to :class:`TestResult`
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    plan = plan or PermutationPlan()
    names = [canonical_name(nm) for nm in names]
    if check:
        validate(data)
    ctx = context or PermContext(data, theta0, eps=eps)
    tails = pns_tails or (alpha / 2.0, 1.0 - alpha / 2.0)
    if perms is None and any(nm in PERMUTATION_TESTS for nm in names):
        perms = permutation_matrix(plan, ctx.n)
    identity = np.arange(ctx.n)[None, :]

    results = {}
    for name in names:
        results[name] = _run_one(ctx, name, plan, perms, identity, alpha, plm_variant, tails, clr_draws)
    return results


def _sigma_condition(ctx):
    # built directly so that non-CLR tests never touch the conditioning matrices
    lam = np.linalg.eigvalsh(weighted_gram(ctx.Z, ctx.u**2))
    return float(lam[-1] / lam[0]) if lam[0] > 0 else math.inf


def _run_one(ctx, name, plan, perms, identity, alpha, plm_variant, tails, clr_draws):
    if name in ASYMPTOTIC_TESTS:
        ms = ctx.moments
        if name == "AR":
            value = ar_stat(ms)
            p = float(stats.chi2.sf(value, ctx.k))
            crit = float(stats.chi2.isf(alpha, ctx.k))
        elif name == "LM":
            value = lm_stat(ms)
            p = float(stats.chi2.sf(value, ctx.d))
            crit = float(stats.chi2.isf(alpha, ctx.d))
        else:
            T = ms.T_a if name == "CLRa" else ms.T_b
            value = clr_stat(ms.S_hat, T)
            ref = clr_reference(T, draws=clr_draws, seed=derive_seed(plan.seed, 0xC1A))
            crit = float(np.quantile(ref, 1.0 - alpha, method="inverted_cdf"))
            p = float(np.count_nonzero(ref >= value) / ref.size)
            return TestResult(name, value, p, bool(value > crit), alpha, critical_value=crit,
                              sigma_condition=_sigma_condition(ctx), seed=plan.seed)
        return TestResult(name, value, p, bool(p <= alpha), alpha, critical_value=crit,
                          sigma_condition=_sigma_condition(ctx), seed=plan.seed)

    if name == "PLM":
        # the permutation LM compares the sample LM with the PLM reference set
        value = lm_stat(ctx.moments)
    else:
        value = ctx.batch(name, identity)[0]
        if np.isnan(value):
            raise SingularCovariance(f"{name}: Sigma_hat(theta0) is not positive definite")
        value = float(value)
    ref = ctx.batch(name, perms, plm_variant=plm_variant)
    keep = np.isfinite(ref)
    dropped = int(ref.size - np.count_nonzero(keep))
    if dropped:
        warnings.warn(f"{name}: dropped {dropped} degenerate permutation draws", RuntimeWarning, stacklevel=3)
    if not keep.any() or (not plan.exhaustive and dropped > MAX_DROPPED_FRACTION * ref.size):
        raise TooFewDraws(f"{name}: {dropped} of {ref.size} permutation draws were degenerate")
    ref = ref[keep]
    outcome = randomization_decision(value, ref, alpha, includes_observed=plan.exhaustive)
    if name == "PNS":
        p, reject = _pns_decision(value, ref, tails, plan.exhaustive)
    else:
        p, reject = outcome.p_value, bool(outcome.p_value <= alpha)
    return TestResult(
        name,
        value,
        float(p),
        reject,
        alpha,
        outcome=outcome,
        critical_value=outcome.critical_value,
        n_perm=int(ref.size),
        dropped=dropped,
        sigma_condition=_sigma_condition(ctx) if name != "PNS" else None,
        seed=plan.seed,
    )


def run_test(data, theta0, stat_name, plan=None, alpha=0.05, **options):
    """Run one test; see :func:`run_tests` for the options."""
    name = canonical_name(stat_name)
    return run_tests(data, theta0, [name], plan=plan, alpha=alpha, **options)[name]


# -- confidence sets ---------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Evaluation grid for test inversion (``values`` overrides the rest)."""

    center: Optional[float] = None
    halfwidth: Optional[float] = None
    points: int = 401
    refine: bool = True
    values: Optional[tuple] = None


@dataclass
class ConfidenceSet:
    grid: np.ndarray
    accepted: np.ndarray
    intervals: list = field(default_factory=list)
    unbounded_left: bool = False
    unbounded_right: bool = False

    @property
    def length(self):
        if self.unbounded_left or self.unbounded_right:
            return math.inf
        return float(sum(hi - lo for lo, hi in self.intervals))

    @property
    def is_empty(self):
        return not self.intervals

    def as_text(self, digits=4):
        if not self.intervals:
            return "{}"
        parts = []
        for lo, hi in self.intervals:
            left = "(-inf" if lo == -math.inf else f"[{lo:.{digits}g}"
            right = "+inf)" if hi == math.inf else f"{hi:.{digits}g}]"
            parts.append(f"{left}, {right}")
        return " U ".join(parts)


def point_plan(plan, index):
    """Plan used at grid point ``index``; depends only on ``(plan.seed, index)``."""
    return plan.with_seed(derive_seed(plan.seed, index))


def _default_grid(data, alpha):
    est = tsls(data, alpha)
    center = est.estimate
    se = est.se
    if not np.isfinite(center):
        center = 0.0
    if not np.isfinite(se) or se <= 0:
        se = max(1.0, abs(center))
    return center, 20.0 * se


def _runs_to_intervals(grid, accepted):
    intervals = []
    m = grid.size
    j = 0
    while j < m:
        if not accepted[j]:
            j += 1
            continue
        start = j
        while j + 1 < m and accepted[j + 1]:
            j += 1
        lo = -math.inf if start == 0 else float(grid[start])
        hi = math.inf if j == m - 1 else float(grid[j])
        intervals.append((lo, hi))
        j += 1
    return intervals


def confidence_set(data, stat_name, alpha=0.05, grid=None, plan=None, **options):
    """
    Confidence set for a scalar structural coefficient by test inversion.

    Grid point ``theta`` is accepted when the level-``alpha`` test does not
    reject (non-randomized rule). Accepted grid endpoints are reported as
    unbounded ends. With ``grid.refine`` each accept/reject flip is bisected
    once more.

    Returns
    -------
    ConfidenceSet
    """
    validate(data)
    if data.d != 1:
        raise DimensionMismatch("confidence sets are only available for d = 1")
    plan = plan or PermutationPlan(seed=0)
    grid = grid or GridSpec()
    if grid.values is not None:
        base = np.asarray(sorted(grid.values), dtype=float)
    else:
        if grid.points < 1:
            raise EmptyGrid("grid needs at least one point")
        center, halfwidth = grid.center, grid.halfwidth
        if center is None or halfwidth is None:
            c0, h0 = _default_grid(data, alpha)
            center = c0 if center is None else center
            halfwidth = h0 if halfwidth is None else halfwidth
        base = np.linspace(center - halfwidth, center + halfwidth, grid.points) if grid.points > 1 else np.array([center])
    if base.size == 0:
        raise EmptyGrid("grid is empty")

    def accept(theta, index):
        res = run_test(data, [theta], stat_name, plan=point_plan(plan, index), alpha=alpha, check=False, **options)
        return not res.reject

    flags = np.array([accept(t, j) for j, t in enumerate(base)], dtype=bool)
    thetas, accepted = base, flags
    if grid.refine and base.size > 1:
        extra_t, extra_f = [], []
        idx = base.size
        for j in range(base.size - 1):
            if flags[j] != flags[j + 1]:
                mid = 0.5 * (base[j] + base[j + 1])
                extra_t.append(mid)
                extra_f.append(accept(mid, idx))
                idx += 1
        if extra_t:
            thetas = np.concatenate([base, extra_t])
            accepted = np.concatenate([flags, extra_f])
            order = np.argsort(thetas, kind="stable")
            thetas, accepted = thetas[order], accepted[order]
    return ConfidenceSet(
        grid=thetas,
        accepted=accepted,
        intervals=_runs_to_intervals(thetas, accepted),
        unbounded_left=bool(accepted[0]),
        unbounded_right=bool(accepted[-1]),
    )


# -- diagnostics -------------------------------------------------------------


def first_stage_f(data):
    """
    Heteroskedasticity-robust (HC0) first-stage Wald statistic for each
    endogenous column, divided by the number of instruments.

    An exact first-stage fit has zero residual variance; its F is reported
    as ``inf`` with a warning.
    """
    validate(data)
    res = residualize(data, np.zeros(data.d))
    Z, Yt = res.Z, res.Ytilde
    k = Z.shape[1]
    ZZ_inv = np.linalg.inv(Z.T @ Z)
    out = np.empty(data.d)
    for s in range(data.d):
        coef = ZZ_inv @ Z.T @ Yt[:, s]
        v = Yt[:, s] - Z @ coef
        if np.allclose(v, 0.0, atol=1e-12 * max(1.0, np.abs(Yt[:, s]).max())):
            warnings.warn(f"first stage of column {s} fits exactly; F set to inf", RuntimeWarning, stacklevel=2)
            out[s] = math.inf
            continue
        meat = (Z * v[:, None] ** 2).T @ Z
        cov = ZZ_inv @ meat @ ZZ_inv
        out[s] = float(coef @ np.linalg.solve(cov, coef)) / k
    return out


def breusch_pagan(data, studentized=True):
    """
    Breusch-Pagan p-values for the reduced-form regressions of ``y`` and of
    the first column of ``Y`` on ``[W, X]``.

    Squared residuals are regressed on the reduced-form fitted values. The
    default is Koenker's studentized ``n R^2`` form; ``studentized=False``
    gives the original ``ESS / (2 sigma^4)`` form. Both use a chi-square(1)
    reference.

    Returns
    -------
    tuple of float
        ``(p_y, p_Y)``.
    """
    validate(data)
    design = np.column_stack([data.W, data.X])
    Q = orthonormal_basis(design, name="[W, X]")
    pvals = []
    for target in (data.y, data.Y[:, 0]):
        fitted = Q @ (Q.T @ target)
        e2 = (target - fitted) ** 2
        aux = np.column_stack([np.ones_like(fitted), fitted])
        coef, *_ = np.linalg.lstsq(aux, e2, rcond=None)
        pred = aux @ coef
        tss = float(np.sum((e2 - e2.mean()) ** 2))
        ess = float(np.sum((pred - e2.mean()) ** 2))
        if tss <= 1e-14 * max(1.0, float(np.sum(e2**2))):
            pvals.append(1.0)
            continue
        if studentized:
            stat = data.n * ess / tss
        else:
            sigma2 = e2.mean()
            stat = ess / (2.0 * sigma2**2)
        pvals.append(float(stats.chi2.sf(stat, 1)))
    return tuple(pvals)


@dataclass
class TSLSResult:
    estimate: float
    se: float
    wald_ci: tuple
    ar_ci: list


def _quadratic_set(a2, a1, a0):
    """Solution set of ``a2 t^2 + a1 t + a0 <= 0`` as a list of intervals."""
    scale = max(abs(a2), abs(a1), abs(a0), 1e-300)
    if abs(a2) <= 1e-12 * scale:
        if abs(a1) <= 1e-12 * scale:
            return [(-math.inf, math.inf)] if a0 <= 0 else []
        root = -a0 / a1
        return [(-math.inf, root)] if a1 > 0 else [(root, math.inf)]
    disc = a1 * a1 - 4.0 * a2 * a0
    if disc < 0:
        return [] if a2 > 0 else [(-math.inf, math.inf)]
    r1 = (-a1 - math.sqrt(disc)) / (2.0 * a2)
    r2 = (-a1 + math.sqrt(disc)) / (2.0 * a2)
    lo, hi = min(r1, r2), max(r1, r2)
    if a2 > 0:
        return [(lo, hi)]
    return [(-math.inf, lo), (hi, math.inf)]


def tsls(data, alpha=0.05):
    """
    Two-stage least squares for a single endogenous regressor, with the
    homoskedastic Wald interval and the homoskedastic AR interval obtained by
    inverting ``(n-k-p)/k * u'P_Z u / u'M_[Z,X] u`` against ``F(k, n-k-p)``.
    """
    validate(data)
    if data.d != 1:
        raise DimensionMismatch("tsls is only implemented for d = 1")
    res = residualize(data, np.zeros(1))
    Z, Yt = res.Z, res.Ytilde[:, 0]
    yt = res.u_tilde
    n, k, p = data.n, data.k, data.p
    QZ = orthonormal_basis(Z, name="Z")
    PY = QZ @ (QZ.T @ Yt)
    denom = float(Yt @ PY)
    if denom <= 0:
        estimate, se = math.nan, math.inf
    else:
        estimate = float(PY @ yt) / denom
        e = yt - Yt * estimate
        sigma2 = float(e @ e) / (n - p - 1)
        se = math.sqrt(sigma2 / denom) if sigma2 > 0 else 0.0
    z = stats.norm.isf(alpha / 2.0)
    wald = (estimate - z * se, estimate + z * se)

    crit = stats.f.isf(alpha, k, n - k - p)
    c = k * crit / (n - k - p)
    # u(t) = yt - t Yt; u'P_Z u - c u'M_Z u <= 0 on the X-complement
    Pa, Pb = QZ.T @ yt, QZ.T @ Yt
    qa, qb, qab = float(yt @ yt), float(Yt @ Yt), float(yt @ Yt)
    pa, pb, pab = float(Pa @ Pa), float(Pb @ Pb), float(Pa @ Pb)
    a2 = pb - c * (qb - pb)
    a1 = -2.0 * (pab - c * (qab - pab))
    a0 = pa - c * (qa - pa)
    return TSLSResult(estimate=estimate, se=se, wald_ci=wald, ar_ci=_quadratic_set(a2, a1, a0))
