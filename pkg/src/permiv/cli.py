"""
Command-line front end.

``permiv test``     run tests of ``H0: theta = theta0`` on a CSV file
``permiv ci``       confidence set for a single endogenous coefficient
``permiv simulate`` null rejection tables for the built-in designs

Unlike the library, the CLI prepends an intercept column to the exogenous
block.
"""
import argparse
import csv
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from permiv.exceptions import ConfigError, ParseError, PermivError
from permiv.inference import (
    ALL_TESTS,
    GridSpec,
    breusch_pagan,
    canonical_name,
    confidence_set,
    first_stage_f,
    run_tests,
)
from permiv.kernels import DEFAULT_EPS
from permiv.model import IVData
from permiv.permutation import PermutationPlan
from permiv.simulation import FAMILIES, PRESETS, SimDesign, preset, rejection_table

FORMATS = ("json", "csv", "text")


@dataclass
class RunConfig:
    input: Optional[str] = None
    outcome: Optional[str] = None
    endogenous: list = field(default_factory=list)
    exogenous: list = field(default_factory=list)
    instruments: list = field(default_factory=list)
    theta0: list = field(default_factory=list)
    alpha: float = 0.05
    stats: list = field(default_factory=lambda: ["PAR1", "PAR2"])
    perms: str = "999"
    seed: Optional[int] = None
    eps: float = DEFAULT_EPS
    format: str = "json"
    output: Optional[str] = None
    grid_center: Optional[float] = None
    grid_halfwidth: Optional[float] = None
    grid_points: int = 401

    def validate(self, need_data=True):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {', '.join(FORMATS)}")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")
        self.stats = [canonical_name(s) for s in self.stats]
        self.plan()
        if not need_data:
            return self
        if not self.input:
            raise ConfigError("--input is required")
        if not self.outcome or not self.endogenous or not self.instruments:
            raise ConfigError("--outcome, --endogenous and --instruments are required")
        roles = [self.outcome] + self.endogenous + self.exogenous + self.instruments
        dup = sorted({c for c in roles if roles.count(c) > 1})
        if dup:
            raise ConfigError(f"columns assigned to more than one role: {', '.join(dup)}")
        if not self.theta0:
            self.theta0 = [0.0] * len(self.endogenous)
        if len(self.theta0) != len(self.endogenous):
            raise ConfigError(f"theta0 has {len(self.theta0)} entries for {len(self.endogenous)} endogenous columns")
        return self

    def plan(self):
        if str(self.perms).lower() == "exhaustive":
            return PermutationPlan(mode="exhaustive", seed=self.seed)
        try:
            n_perm = int(self.perms)
        except ValueError:
            raise ConfigError(f"--perms must be an integer or 'exhaustive', got {self.perms!r}") from None
        return PermutationPlan(n_perm=n_perm, seed=self.seed)


def read_csv(path, columns):
    """
    Read the named numeric columns of a comma-separated file with a header.

    Returns
    -------
    dict mapping column name to float array
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: file is empty", line=1) from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise ParseError(f"{path}: column(s) not found in header: {', '.join(missing)}", line=1,
                             column=missing[0])
        idx = {c: header.index(c) for c in columns}
        values = {c: [] for c in columns}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}", line=lineno)
            for c in columns:
                cell = row[idx[c]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: column {c!r} is not numeric: {cell!r}",
                                     line=lineno, column=c) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{lineno}: column {c!r} is not finite", line=lineno, column=c)
                values[c].append(v)
    return {c: np.asarray(v, dtype=float) for c, v in values.items()}


def load_data(cfg):
    cols = read_csv(cfg.input, [cfg.outcome] + cfg.endogenous + cfg.exogenous + cfg.instruments)
    n = cols[cfg.outcome].shape[0]

    def block(names):
        return np.column_stack([cols[c] for c in names]) if names else np.empty((n, 0))

    X = np.column_stack([np.ones(n), block(cfg.exogenous)])
    return IVData.from_arrays(cols[cfg.outcome], block(cfg.endogenous), X, block(cfg.instruments))


def _effective_seed(seed):
    if seed is not None:
        return int(seed)
    return int(np.random.SeedSequence().entropy % (2**63))


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def test_report(cfg, results):
    return {
        "command": "test",
        "seed": cfg.seed,
        "alpha": cfg.alpha,
        "theta0": cfg.theta0,
        "results": [{k: _clean(v) for k, v in r.as_dict().items()} for r in results],
    }


def render(report, fmt):
    if fmt == "json":
        return json.dumps(report, indent=2) + "\n"
    rows = report.get("results") or []
    if fmt == "csv":
        lines = ["statistic,value,p_value,reject,n_perm,dropped"]
        for r in rows:
            lines.append(",".join("" if r[k] is None else str(r[k]) for k in
                                  ("statistic", "value", "p_value", "reject", "n_perm", "dropped")))
        return "\n".join(lines) + "\n"
    out = [f"seed: {report['seed']}", f"alpha: {report['alpha']}"]
    if "theta0" in report:
        out.append(f"theta0: {report['theta0']}")
    for r in rows:
        verdict = "reject" if r["reject"] else "accept"
        out.append(f"{r['statistic']:6s} value={r['value']:.6g} p={r['p_value']:.4f} {verdict}")
    return "\n".join(out) + "\n"


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".permiv-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(cfg, text, stdout):
    if cfg.output:
        write_atomic(cfg.output, text)
    else:
        stdout.write(text)


def cmd_test(cfg, stdout=sys.stdout):
    cfg.validate()
    cfg.seed = _effective_seed(cfg.seed)
    data = load_data(cfg)
    res = run_tests(data, np.asarray(cfg.theta0, dtype=float), cfg.stats, plan=cfg.plan(), alpha=cfg.alpha, eps=cfg.eps)
    emit(cfg, render(test_report(cfg, [res[s] for s in cfg.stats]), cfg.format), stdout)
    return 0


def cmd_ci(cfg, stdout=sys.stdout):
    cfg.validate()
    if len(cfg.endogenous) != 1:
        raise ConfigError("ci needs exactly one endogenous column")
    cfg.seed = _effective_seed(cfg.seed)
    data = load_data(cfg)
    grid = GridSpec(center=cfg.grid_center, halfwidth=cfg.grid_halfwidth, points=cfg.grid_points)
    sets = {}
    for s in cfg.stats:
        cs = confidence_set(data, s, alpha=cfg.alpha, grid=grid, plan=cfg.plan(), eps=cfg.eps)
        sets[s] = {
            "set": cs.as_text(),
            "intervals": [[_clean(lo), _clean(hi)] for lo, hi in cs.intervals],
            "unbounded_left": cs.unbounded_left,
            "unbounded_right": cs.unbounded_right,
            "length": _clean(cs.length),
        }
    bp_y, bp_Y = breusch_pagan(data)
    report = {
        "command": "ci",
        "seed": cfg.seed,
        "alpha": cfg.alpha,
        "confidence_sets": sets,
        "first_stage_f": [_clean(float(f)) for f in first_stage_f(data)],
        "breusch_pagan": {"y": bp_y, "Y": bp_Y},
    }
    if cfg.format == "json":
        text = json.dumps(report, indent=2) + "\n"
    elif cfg.format == "csv":
        lines = ["statistic,set,unbounded_left,unbounded_right,length"]
        for s, v in sets.items():
            lines.append(f"{s},\"{v['set']}\",{v['unbounded_left']},{v['unbounded_right']},{v['length']}")
        text = "\n".join(lines) + "\n"
    else:
        lines = [f"seed: {cfg.seed}", f"alpha: {cfg.alpha}"]
        lines += [f"{s:6s} {v['set']}" for s, v in sets.items()]
        lines.append("first-stage F: " + ", ".join(f"{f:.4g}" for f in first_stage_f(data)))
        lines.append(f"Breusch-Pagan p-values: y {bp_y:.4f}, Y {bp_Y:.4f}")
        text = "\n".join(lines) + "\n"
    emit(cfg, text, stdout)
    return 0


def cmd_simulate(args, stdout=sys.stdout, stderr=sys.stderr):
    if args.preset:
        designs, tests = preset(args.preset)
    else:
        if args.family is None:
            raise ConfigError("give --preset or --family")
        designs = [SimDesign(args.family, args.n, args.k, args.p, args.lam, args.dist)]
        tests = ["AR", "PAR1", "PAR2"]
    if args.stats:
        tests = [canonical_name(s) for s in _split(args.stats)]
    if args.format not in FORMATS:
        raise ConfigError(f"format must be one of {', '.join(FORMATS)}")
    try:
        n_perm = int(args.perms)
    except ValueError:
        raise ConfigError("--perms must be an integer for simulate") from None
    seed = 0 if args.seed is None else int(args.seed)
    table = rejection_table(designs, tests, reps=args.reps, n_perm=n_perm, alpha=args.alpha, seed=seed,
                            workers=args.workers)
    text = {"json": table.to_json, "csv": table.to_csv, "text": table.to_text}[args.format]()
    if args.output:
        write_atomic(args.output, text)
    else:
        stdout.write(text)
    stderr.write(f"seed {seed}\n")
    return 0


def _split(values):
    out = []
    for v in values or []:
        out.extend(x.strip() for x in v.split(",") if x.strip())
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="permiv", description="Permutation tests for linear IV regression.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--stats", nargs="+", help=f"statistics among {', '.join(ALL_TESTS)}")
        p.add_argument("--perms", default="999", help="Monte Carlo draws or 'exhaustive'")
        p.add_argument("--seed", type=int)
        p.add_argument("--format", default="json", choices=FORMATS)
        p.add_argument("--output", help="write here (atomically) instead of stdout")

    for name in ("test", "ci"):
        p = sub.add_parser(name)
        p.add_argument("--input", required=True)
        p.add_argument("--outcome", required=True)
        p.add_argument("--endogenous", nargs="+", required=True)
        p.add_argument("--exogenous", nargs="*", default=[])
        p.add_argument("--instruments", nargs="+", required=True)
        p.add_argument("--theta0", type=float, nargs="+")
        p.add_argument("--eps", type=float, default=DEFAULT_EPS)
        common(p)
        if name == "ci":
            p.add_argument("--grid-center", type=float)
            p.add_argument("--grid-halfwidth", type=float)
            p.add_argument("--grid-points", type=int, default=401)

    p = sub.add_parser("simulate")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--family", help=f"one of {', '.join(FAMILIES)}")
    p.add_argument("--dist", help="t5 or normal")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--lam", type=float, default=4.0)
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--workers", type=int, help="worker processes (default: PERMIV_THREADS or 1)")
    common(p)
    return parser


def config_from_args(args):
    cfg = RunConfig(
        input=args.input,
        outcome=args.outcome,
        endogenous=_split(args.endogenous),
        exogenous=_split(args.exogenous),
        instruments=_split(args.instruments),
        theta0=list(args.theta0 or []),
        alpha=args.alpha,
        perms=args.perms,
        seed=args.seed,
        eps=args.eps,
        format=args.format,
        output=args.output,
    )
    if args.stats:
        cfg.stats = _split(args.stats)
    if args.command == "ci":
        cfg.grid_center = args.grid_center
        cfg.grid_halfwidth = args.grid_halfwidth
        cfg.grid_points = args.grid_points
        if not args.stats:
            cfg.stats = ["PAR2"]
    return cfg


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args, stdout, stderr)
        cfg = config_from_args(args)
        if args.command == "test":
            return cmd_test(cfg, stdout)
        return cmd_ci(cfg, stdout)
    except FileNotFoundError as exc:
        stderr.write(f"permiv: file not found: {exc.filename}\n")
        return 2
    except OSError as exc:
        stderr.write(f"permiv: cannot access {exc.filename}: {exc.strerror}\n")
        return 2
    except (PermivError, ValueError) as exc:
        stderr.write(f"permiv: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
