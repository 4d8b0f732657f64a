"""``overlap-lab`` command-line program.

Subcommands::

    selftest [--quick]
    tabulate {d11,d12,kernel,rho,bulk} --n N --grid name=start:stop:step ...
    mc verify --n N --samples S --seed SEED --bins SPEC
    bulk converge --z0 Z --n-list 50,100,200 --points P

Exit codes: 0 success, 1 usage error, 2 failed acceptance (selftest),
3 I/O error.  Every run writes a manifest: next to ``--out`` as
``<out>.manifest.json``, or to stderr when the data go to stdout.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import itertools
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_ACCEPTANCE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def parse_complex(text: str) -> complex:
    """Parse ``a+bi`` style numbers (``i`` or ``j`` as imaginary unit)."""
    s = text.strip().replace(" ", "").replace("I", "i").replace("J", "j").replace("i", "j")
    if s in ("j", "+j"):
        return 1j
    if s == "-j":
        return -1j
    if s.endswith("j") and s[:-1] and s[-2] in "+-":
        s = s[:-1] + "1j"
    try:
        return complex(s)
    except ValueError:
        raise UsageError(f"cannot parse complex number {text!r}") from None


@dataclass(frozen=True)
class Grid:
    name: str
    values: tuple

    @classmethod
    def parse(cls, text: str) -> "Grid":
        name, sep, rng = text.partition("=")
        parts = rng.split(":")
        if not sep or not name or len(parts) != 3:
            raise UsageError(f"grid must look like name=start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise UsageError(f"grid bounds must be numbers in {text!r}") from None
        if step <= 0 or stop < start:
            raise UsageError(f"grid {text!r} needs step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        if count > 10**6:
            raise UsageError(f"grid {text!r} has more than 10^6 points")
        return cls(name, tuple(float(start + i * step) for i in range(count)))


_POINT_VARS = {"r", "phi", "x", "y"}


def _moving_points(grids: Sequence[Grid]):
    """Yield ``(grid values tuple, complex point)`` over the grid product."""
    names = [g.name for g in grids]
    unknown = [n for n in names if n not in _POINT_VARS]
    if unknown:
        raise UsageError(f"unknown grid variable {unknown[0]!r}; use r, phi, x or y")
    if len(set(names)) != len(names):
        raise UsageError("each grid variable may appear once")
    polar = {"r", "phi"} & set(names)
    cart = {"x", "y"} & set(names)
    if polar and cart:
        raise UsageError("grid mixes polar (r, phi) and Cartesian (x, y) variables")
    for combo in itertools.product(*(g.values for g in grids)):
        v = dict(zip(names, combo))
        if polar:
            z = v.get("r", 0.0) * complex(math.cos(v.get("phi", 0.0)), math.sin(v.get("phi", 0.0)))
        else:
            z = complex(v.get("x", 0.0), v.get("y", 0.0))
        yield combo, z


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunManifest:
    tool_version: str
    command_line: list
    config: dict
    seed: Optional[int]
    started: str
    finished: str = ""
    status: str = "running"
    outputs: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "command_line": list(self.command_line),
            "config": self.config,
            "seed": self.seed,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "outputs": dict(self.outputs),
        }


@dataclass
class Report:
    kind: str
    columns: list
    rows: list
    summary: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def render_report(report: Report, fmt: str, manifest: Optional[RunManifest] = None) -> bytes:
    """Serialize deterministically: the same inputs always give the same bytes."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(report.columns)
        for row in report.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue().encode("utf-8")
    if fmt == "json":
        doc = {
            "kind": report.kind,
            "columns": list(report.columns),
            "rows": [[_json_value(v) for v in row] for row in report.rows],
            "summary": _json_value(report.summary),
            "manifest": manifest.as_dict() if manifest else None,
        }
        return (json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n").encode("utf-8")
    raise UsageError(f"unknown format {fmt!r}")


def emit_report(report: Report, fmt: str, path: Optional[str], manifest: Optional[RunManifest] = None) -> Optional[str]:
    """Write the report to ``path`` (stdout for ``None`` or ``-``); returns the SHA-256 of the bytes."""
    data = render_report(report, fmt, manifest)
    digest = hashlib.sha256(data).hexdigest()
    if path in (None, "-"):
        sys.stdout.write(data.decode("utf-8"))
        sys.stdout.flush()
    else:
        with open(path, "wb") as fh:
            fh.write(data)
    return digest


def schema_path() -> str:
    return os.path.join(os.path.dirname(__file__), "schema", "report.schema.json")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands


def _value_row(v) -> list:
    from .specfun import ScaledComplex

    if isinstance(v, ScaledComplex):
        return [v.mantissa.real, v.mantissa.imag, v.log_scale]
    v = complex(v)
    return [v.real, v.imag, 0.0]


def cmd_tabulate(args) -> tuple:
    from . import bulk, kernels

    grids = [Grid.parse(g) for g in args.grid]
    if not grids:
        raise UsageError("tabulate needs at least one --grid")
    others = [parse_complex(p) for p in args.points]
    q = args.quantity
    if q != "bulk" and args.n is None:
        raise UsageError(f"tabulate {q} requires --n")
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be >= 1")
    k = 1 + len(others)
    if args.k is not None and q != "kernel" and args.k != k:
        raise UsageError(f"--k {args.k} needs {args.k - 1} --points values, got {len(others)}")
    sub = args.bulk_quantity
    if q == "d12" or (q == "bulk" and sub == "d12"):
        if k < 2:
            raise UsageError("d12 needs k >= 2 (add --points)")
    if q != "bulk" and q != "kernel" and k > args.n:
        raise UsageError("k must not exceed N")
    x_pt = parse_complex(args.x) if args.x else 0j
    cond = parse_complex(args.cond) if args.cond else 0j
    cond_bar = parse_complex(args.cond_bar) if args.cond_bar else cond.conjugate()

    def value(z):
        pts = [z] + others
        if q == "d11":
            return kernels.D11(args.n, pts)
        if q == "d12":
            return kernels.D12(args.n, pts)
        if q == "rho":
            return kernels.rho(args.n, pts)
        if q == "kernel":
            return kernels.K11(args.n, x_pt, z, (cond, cond_bar))
        if sub == "d11":
            return bulk.D11_bulk(pts)
        if sub == "d12":
            return bulk.D12_bulk(pts)
        if sub == "rho":
            return bulk.rho_bulk(pts)
        return bulk.K11_bulk(x_pt, z, (cond, cond_bar))

    rows = []
    for combo, z in _moving_points(grids):
        rows.append(list(combo) + _value_row(value(z)))
    columns = [g.name for g in grids] + ["re", "im", "log_scale"]
    config = {
        "quantity": q,
        "bulk_quantity": sub if q == "bulk" else None,
        "n": args.n,
        "k": k,
        "grid": list(args.grid),
        "points": list(args.points),
        "x": args.x,
        "cond": args.cond,
        "cond_bar": args.cond_bar,
    }
    summary = {"note": "value = (re + i im) * exp(log_scale)"}
    return Report(f"tabulate-{q}", columns, rows, summary), config, None, EXIT_OK


def cmd_mc_verify(args) -> tuple:
    from . import montecarlo as mc

    if args.n < 1 or args.samples < 1:
        raise UsageError("--n and --samples must be >= 1")
    if not 0 <= args.seed < 2**64:
        raise UsageError("--seed must be a 64-bit unsigned integer")
    try:
        bins = mc.BinSpec.parse(args.bins) if args.bins else mc.BinSpec.annular(math.sqrt(args.n) + 1.0, 12, 8)
        pair_bins = mc.BinSpec.parse(args.pair_bins) if args.pair_bins else mc.BinSpec.annular(
            math.sqrt(args.n) + 0.2, 3, 6)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pairs = args.n >= 2 and not args.no_pairs
    cfg = mc.EnsembleConfig(
        N=args.n, samples=args.samples, seed=args.seed, bin_spec=bins, pair_bin_spec=pair_bins,
        pairs=pairs, workers=args.workers, archive_path=args.archive,
    )
    rep = mc.run_campaign(cfg)
    N = args.n
    exact = {
        "rho1": mc.exact_bin_values(lambda z: mc.rho1_exact(N, z), bins),
        "d11": mc.exact_bin_values(lambda z: mc.d11_one_point_exact(N, z), bins),
    }
    if N >= 2:
        exact["d11_eigenvalue_only"] = exact["d11"]
    if pairs:
        exact["rho2"] = mc.exact_pair_values(lambda a, b: mc.rho2_exact(N, a, b), pair_bins)
        exact["d12"] = mc.exact_pair_values(lambda a, b: mc.d12_two_point_exact(N, a, b), pair_bins)
    columns = ["quantity", "center1_re", "center1_im", "center2_re", "center2_im", "estimate_re", "estimate_im",
               "stderr_re", "stderr_im", "hits", "exact_re", "exact_im", "sigma", "median_of_means_re"]
    rows = []
    fractions = {}
    for name in sorted(exact):
        h = rep.histograms[name]
        min_hits = 500 if name in ("rho1", "d11", "d11_eigenvalue_only") else 200
        c = mc.compare_bins(h, exact[name], min_hits, seed=args.seed)
        fractions[name] = {"qualifying": c.n_qualifying, "within_3_sigma": c.pass_fraction}
        mom = h.median_of_means()
        c1 = c.centers[0]
        c2 = c.centers[1] if len(c.centers) > 1 else None
        for i in range(h.n_bins):
            second = [c2[i].real, c2[i].imag] if c2 is not None else [None, None]
            rows.append([name, c1[i].real, c1[i].imag, *second, c.estimate[i].real, c.estimate[i].imag,
                         c.se_re[i], c.se_im[i], int(c.hits[i]), c.exact[i].real, c.exact[i].imag,
                         float(c.sigma[i]), mom[i].real])
    summary = rep.summary()
    summary["comparisons"] = fractions
    summary["wall_time"] = rep.wall_time
    status = None if rep.status == "complete" else rep.status
    return Report("mc-verify", columns, rows, summary), cfg.describe(), args.seed, EXIT_OK if status is None else EXIT_IO


def cmd_bulk_converge(args) -> tuple:
    import cmath

    from . import bulk
    from .montecarlo import worker_count

    z0 = parse_complex(args.z0)
    n_list = _int_list(args.n_list)
    if not n_list:
        raise UsageError("--n-list is empty")
    if args.points < 0:
        raise UsageError("--points must be >= 0")
    rng = np.random.default_rng(args.seed)
    pairs = []
    for s in np.linspace(0.1, 3.0, args.points) if args.points else []:
        l1 = 0.5 * math.sqrt(rng.uniform()) * cmath.exp(2j * math.pi * rng.uniform())
        pairs.append((l1, l1 + float(s) * cmath.exp(2j * math.pi * rng.uniform())))
    try:
        rep = bulk.bulk_convergence_probe(n_list, z0, pairs, workers=worker_count())
    except (ValueError, OverflowError) as exc:
        raise UsageError(str(exc)) from None
    columns = ["N", "lam1_re", "lam1_im", "lam2_re", "lam2_im", "ratio_re", "ratio_im", "limit_re", "limit_im",
               "abs_error"]
    rows = []
    for block in rep.ratio_samples:
        for N, l1, l2, r, b in block:
            rows.append([N, l1.real, l1.imag, l2.real, l2.imag, r.real, r.imag, b.real, b.imag, abs(r - b)])
    summary = {
        "z0": [z0.real, z0.imag],
        "N_list": n_list,
        "sup_error": rep.sup_error,
        "k1_value": rep.k1_value,
        "k1_error": rep.k1_error,
        "supported_k1_normalization": rep.supported_k1_normalization(),
    }
    config = {"z0": args.z0, "n_list": n_list, "points": args.points, "seed": args.seed}
    return Report("bulk-converge", columns, rows, summary), config, args.seed, EXIT_OK


def cmd_selftest(args) -> tuple:
    from . import acceptance

    only = set(_int_list(args.only)) if args.only else None

    def show(res):
        print(res.line(), file=sys.stderr, flush=True)

    results = acceptance.run_all(quick=args.quick, only=only, callback=show)
    columns = ["criterion", "name", "passed", "runtime", "budget", "detail"]
    rows = [[r.number, r.name, r.passed, round(r.runtime, 3), r.budget, r.detail] for r in results]
    ok = all(r.passed for r in results)
    summary = {"passed": sum(r.passed for r in results), "total": len(results), "quick": bool(args.quick)}
    config = {"quick": bool(args.quick), "only": sorted(only) if only else None}
    return Report("selftest", columns, rows, summary), config, None, EXIT_OK if ok else EXIT_ACCEPTANCE


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_output(p):
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="output format (default csv)")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.add_argument("--manifest", default=None, help="manifest path (default <out>.manifest.json or stderr)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="overlap-lab", description="Conditional eigenvector overlaps of the complex Ginibre ensemble.")
    p.add_argument("--version", action="version", version=f"overlap-lab {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{selftest,tabulate,mc,bulk}")
    sub.required = True

    st = sub.add_parser("selftest", help="run the numerical acceptance suite")
    st.add_argument("--quick", action="store_true", help="reduced sample sizes (under a minute)")
    st.add_argument("--only", default=None, help="comma-separated criterion numbers")
    _add_output(st)
    st.set_defaults(func=cmd_selftest)

    tb = sub.add_parser("tabulate", help="tabulate an exact formula on a grid")
    tb.add_argument("quantity", choices=("d11", "d12", "kernel", "rho", "bulk"))
    tb.add_argument("--n", type=int, default=None, help="matrix size N")
    tb.add_argument("--k", type=int, default=None, help="number of points (1 + number of --points)")
    tb.add_argument("--grid", action="append", default=[], help="name=start:stop:step with name in r, phi, x, y")
    tb.add_argument("--points", nargs="*", default=[], help="fixed further points, as a+bi")
    tb.add_argument("--x", default=None, help="first kernel argument (kernel quantities)")
    tb.add_argument("--cond", default=None, help="conditioning eigenvalue lambda (kernel quantities)")
    tb.add_argument("--cond-bar", default=None, help="independent conjugate coordinate of the condition")
    tb.add_argument("--bulk-quantity", choices=("d11", "d12", "rho", "kernel"), default="d11",
                    help="which bulk limit to tabulate with 'bulk'")
    _add_output(tb)
    tb.set_defaults(func=cmd_tabulate)

    mcp = sub.add_parser("mc", help="Monte Carlo runs")
    mcs = mcp.add_subparsers(dest="mc_command", parser_class=_Parser, metavar="{verify}")
    mcs.required = True
    v = mcs.add_parser("verify", help="histogram estimators against exact values")
    v.add_argument("--n", type=int, required=True)
    v.add_argument("--samples", type=int, required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--bins", default=None, help="annular:RMAX:NR[:NPHI] or cartesian:CENTER:HALFWIDTH:NSIDE")
    v.add_argument("--pair-bins", default=None, help="binning for two-point estimators")
    v.add_argument("--no-pairs", action="store_true", help="skip two-point histograms")
    v.add_argument("--workers", type=int, default=None)
    v.add_argument("--archive", default=None, help="write per-sample records (JSON lines)")
    _add_output(v)
    v.set_defaults(func=cmd_mc_verify)

    bp = sub.add_parser("bulk", help="bulk scaling studies")
    bs = bp.add_subparsers(dest="bulk_command", parser_class=_Parser, metavar="{converge}")
    bs.required = True
    c = bs.add_parser("converge", help="finite-N ratios against the bulk kernel")
    c.add_argument("--z0", default="0", help="base point in the unit disk, a+bi")
    c.add_argument("--n-list", default="50,100,200")
    c.add_argument("--points", type=int, default=20, help="number of test pairs")
    c.add_argument("--seed", type=int, default=0)
    _add_output(c)
    c.set_defaults(func=cmd_bulk_converge)
    return p


def _write_manifest(manifest: RunManifest, args) -> None:
    text = json.dumps(manifest.as_dict(), sort_keys=True, indent=1) + "\n"
    target = getattr(args, "manifest", None)
    out = getattr(args, "out", None)
    if target is None and out not in (None, "-"):
        target = out + ".manifest.json"
    if target is None:
        sys.stderr.write(text)
        return
    with open(target, "w", encoding="utf-8") as fh:
        fh.write(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    manifest = RunManifest(__version__, ["overlap-lab"] + argv, {}, None, _now())
    code = EXIT_OK
    try:
        report, config, seed, code = args.func(args)
        manifest.config, manifest.seed = _json_value(config), seed
        manifest.status = "ok" if code == EXIT_OK else ("acceptance-failed" if code == EXIT_ACCEPTANCE else "incomplete")
        manifest.finished = _now()
        digest = emit_report(report, args.format, args.out, manifest if args.format == "json" else None)
        manifest.outputs = {args.out or "<stdout>": digest}
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
        manifest.status = f"usage-error: {exc}"
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_IO
        manifest.status = f"io-error: {exc}"
    except Exception as exc:  # numerical failures surface in the manifest too
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_ACCEPTANCE if args.command == "selftest" else EXIT_USAGE
        manifest.status = f"error: {type(exc).__name__}: {exc}"
    manifest.finished = manifest.finished or _now()
    try:
        _write_manifest(manifest, args)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
