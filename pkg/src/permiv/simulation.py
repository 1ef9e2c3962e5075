"""
Monte Carlo designs for null rejection rates and the rejection-table harness.

Every replication draws from its own generator keyed on ``(cell seed,
replicate index)``, so tables do not depend on how replications are spread
over worker processes.
"""
import csv
import io
import json
import math
import os
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from permiv.exceptions import ConfigError, PermivError
from permiv.inference import ALL_TESTS, canonical_name, derive_seed, run_tests
from permiv.model import IVData
from permiv.permstats import PermContext
from permiv.permutation import PermutationPlan, permutation_matrix

FAMILIES = ("cauchy", "homoskedastic", "heteroskedastic")
DISTS = ("t5", "normal")
DEGENERATE_FRACTION = 0.05
HARNESS_EPS = 0.0


@dataclass(frozen=True)
class SimDesign:
    """
    One simulation cell.

    ``family`` is ``"cauchy"`` (every primitive i.i.d. standard Cauchy),
    ``"homoskedastic"`` or ``"heteroskedastic"`` (``u_i = W_i1 v_i``); the
    latter two take ``dist`` in ``{"t5", "normal"}``. Only ``d = 1`` designs
    are generated.
    """

    family: str
    n: int
    k: int
    p: int = 1
    lam: float = 4.0
    dist: Optional[str] = None
    rho: float = 0.5
    theta: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; valid families: {', '.join(FAMILIES)}")
        if self.family == "cauchy":
            if self.dist not in (None, "cauchy"):
                raise ConfigError("the cauchy family takes no dist")
        elif self.dist not in DISTS:
            raise ConfigError(f"family {self.family!r} needs dist in {{{', '.join(DISTS)}}}, got {self.dist!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.p < 1 or self.k < 1:
            raise ConfigError("need p >= 1 and k >= 1")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [-1, 1]")
        if self.n <= self.k + self.p:
            raise ConfigError("need n > k + p")

    @property
    def design_id(self):
        dist = "" if self.family == "cauchy" else f"-{self.dist}"
        return f"{self.family}{dist}-n{self.n}-k{self.k}-p{self.p}-lam{self.lam:g}"

    @property
    def Gamma(self):
        return np.full(self.k, math.sqrt(self.lam / (self.n * self.k)))


def _primitives(design, rng):
    # columns: W (k), X2 (p-1), u or v (1), eps (1)
    n, width = design.n, design.k + design.p + 1
    if design.family == "cauchy":
        return rng.standard_cauchy((n, width))
    z = rng.standard_normal((n, width))
    if design.dist == "normal":
        return z
    # multivariate t5 with identity covariance: one chi-square mixing draw per row
    s = rng.chisquare(5, size=n)
    return z * np.sqrt(3.0 / s)[:, None]


def generate(design, rep):
    """
    Draw replicate ``rep`` of ``design``.

    Returns
    -------
    IVData
        ``X`` is ``[1, X2]``; all intercepts and slopes on ``X2`` are zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence([_cell_seed(design), int(rep)]))
    prim = _primitives(design, rng)
    k, p = design.k, design.p
    W = prim[:, :k]
    X = np.column_stack([np.ones(design.n), prim[:, k : k + p - 1]])
    e1 = prim[:, k + p - 1]
    eps = prim[:, k + p]
    u = W[:, 0] * e1 if design.family == "heteroskedastic" else e1
    V = design.rho * u + math.sqrt(1.0 - design.rho**2) * eps
    Y = W @ design.Gamma + V
    y = Y * design.theta + u
    return IVData.from_arrays(y, Y, X, W)


def _cell_seed(design):
    if design.seed is not None:
        return int(design.seed)
    return zlib.crc32(design.design_id.encode())


def _replicate(args):
    design, rep, names, n_perm, alpha = args
    data = generate(design, rep)
    theta0 = np.array([design.theta])
    plan = PermutationPlan(n_perm=n_perm, seed=derive_seed(_cell_seed(design), rep, 1))
    out = {}
    try:
        ctx = PermContext(data, theta0, eps=HARNESS_EPS)
        perms = permutation_matrix(plan, data.n)
    except PermivError:
        return {nm: (False, n_perm, True) for nm in names}
    for nm in names:
        try:
            # dropped draws are tallied in the table, so the per-run warning is redundant here
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = run_tests(data, theta0, [nm], plan=plan, alpha=alpha, eps=HARNESS_EPS,
                                context=ctx, perms=perms, check=False)[nm]
            out[nm] = (bool(res.reject), res.dropped, False)
        except PermivError:
            # undefined statistic or too many degenerate draws: count as no rejection
            out[nm] = (False, n_perm, True)
    return out


@dataclass
class Cell:
    design_id: str
    test: str
    rejections: int
    reps: int
    n_perm: int
    dropped: int
    failures: int

    @property
    def reject_rate(self):
        return self.rejections / self.reps

    @property
    def mc_se(self):
        f = self.reject_rate
        return math.sqrt(f * (1.0 - f) / self.reps)

    @property
    def degenerate(self):
        return self.dropped > DEGENERATE_FRACTION * self.reps * self.n_perm

    def row(self):
        return {
            "design_id": self.design_id,
            "test": self.test,
            "reject_rate": self.reject_rate,
            "mc_se": self.mc_se,
            "reps": self.reps,
            "n_perm": self.n_perm,
            "degenerate": self.degenerate,
        }


@dataclass
class RejectionTable:
    cells: list = field(default_factory=list)
    seed: Optional[int] = None
    alpha: float = 0.05

    def get(self, design_id, test):
        for c in self.cells:
            if c.design_id == design_id and c.test == test:
                return c
        raise KeyError((design_id, test))

    def rows(self):
        return [c.row() for c in self.cells]

    def to_json(self):
        return json.dumps({"seed": self.seed, "alpha": self.alpha, "rows": self.rows()}, indent=2) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        fields = ["design_id", "test", "reject_rate", "mc_se", "reps", "n_perm", "degenerate"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_text(self):
        lines = [f"{'design':40s} {'test':6s} {'rate%':>7s} {'se%':>6s}"]
        for c in self.cells:
            flag = "  degenerate" if c.degenerate else ""
            lines.append(f"{c.design_id:40s} {c.test:6s} {100 * c.reject_rate:7.2f} {100 * c.mc_se:6.2f}{flag}")
        return "\n".join(lines) + "\n"


def worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("PERMIV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PERMIV_THREADS must be an integer, got {env!r}") from None
    return 1


def rejection_table(designs, test_names, reps=2000, n_perm=999, alpha=0.05, seed=0, workers=None):
    """
    Null rejection frequencies of each named test in each design.

    Parameters
    ----------
    designs : sequence of SimDesign
        Designs with ``seed=None`` get a cell seed derived from ``seed`` and
        the design id.
    test_names : sequence of str
    reps : int, default=2000
        At least 100.
    n_perm : int, default=999
        Monte Carlo permutation draws per replication; at least 99.
    alpha : float, default=0.05
    seed : int, default=0
    workers : int, optional
        Process count; defaults to ``PERMIV_THREADS`` or 1. Results do not
        depend on it.

    Returns
    -------
    RejectionTable
    """
    if reps < 100:
        raise ConfigError("reps must be at least 100")
    if n_perm < 99:
        raise ConfigError("n_perm must be at least 99")
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    names = [canonical_name(t) for t in test_names]
    designs = [
        d if d.seed is not None else replace(d, seed=derive_seed(seed, zlib.crc32(d.design_id.encode())))
        for d in designs
    ]
    for d in designs:
        if "PNS" in names and d.k != 1:
            raise ConfigError(f"PNS needs k = 1; design {d.design_id} has k = {d.k}")
    jobs = [(d, r, names, n_perm, alpha) for d in designs for r in range(reps)]
    nw = worker_count(workers)
    if nw == 1:
        results = [_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, len(jobs) // (8 * nw))))
    table = RejectionTable(seed=seed, alpha=alpha)
    for i, d in enumerate(designs):
        chunk = results[i * reps : (i + 1) * reps]
        for nm in names:
            table.cells.append(
                Cell(
                    design_id=d.design_id,
                    test=nm,
                    rejections=sum(r[nm][0] for r in chunk),
                    reps=reps,
                    n_perm=n_perm,
                    dropped=sum(r[nm][1] for r in chunk),
                    failures=sum(r[nm][2] for r in chunk),
                )
            )
    return table


# -- presets -------------------------------------------------------------------

_ASYM = ["AR", "LM", "CLRa", "CLRb"]
_PERM = ["PAR1", "PAR2", "PLM", "PCLRa", "PCLRb"]


def _het(lam):
    return [
        SimDesign("heteroskedastic", 100, k, p, lam, dist)
        for p in (1, 5)
        for dist in DISTS
        for k in (2, 5, 10)
    ]


PRESETS = {
    "table1": (
        [SimDesign("cauchy", n, k, 1, 4.0) for n in (50, 100) for k in (5, 10)],
        _ASYM + ["PAR1", "PAR2"],
    ),
    "table2": (
        [SimDesign("homoskedastic", n, 1, 1, 4.0, dist) for dist in DISTS for n in (50, 100, 200, 400)],
        _ASYM + _PERM + ["PNS"],
    ),
    "table3": (
        [SimDesign("homoskedastic", 100, 5, p, lam, dist) for lam in (0.1, 4.0, 20.0) for dist in DISTS for p in (1, 5)],
        _ASYM + _PERM,
    ),
    "table4": (_het(0.1), _ASYM + _PERM),
    "table5": (_het(4.0), _ASYM + _PERM),
    "table6": (_het(20.0), _ASYM + _PERM),
    # one small cell for quick checks
    "smoke": ([SimDesign("homoskedastic", 50, 2, 1, 4.0, "normal")], ["AR", "PAR1", "PAR2"]),
}


def preset(name):
    """Designs and test names of a named preset."""
    try:
        designs, tests = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return list(designs), list(tests)


def design_from_dict(fields):
    """Build a :class:`SimDesign` from a mapping (e.g. parsed JSON)."""
    try:
        return SimDesign(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad design fields: {exc}") from None


def design_to_dict(design):
    return asdict(design)


__all__ = [
    "ALL_TESTS",
    "FAMILIES",
    "PRESETS",
    "RejectionTable",
    "SimDesign",
    "design_from_dict",
    "generate",
    "preset",
    "rejection_table",
]
