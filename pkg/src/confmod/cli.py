"""Command-line entry point: ``confmod <subcommand> [flags]``.

Exit codes: 0 success, 1 computation error or failed audit (a structured
JSON error is written), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path

from . import __version__
from .fractals import BUILTIN, CELL_BUDGET, net_cover, resolve_ifs, verify_approximation
from .geometry import Ball
from .incidence import annulus_family, build_incidence, clip_family_to_unit_cube, kl_problem
from .modulus import solve_modulus
from .store import ArtifactStore, default_cache_dir

log = logging.getLogger("confmod")

TIMING_KEYS = {"seconds"}


def _frac(text) -> Fraction:
    try:
        return Fraction(str(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rational number: {text!r}") from None


def _point(text):
    try:
        return tuple(Fraction(t) for t in str(text).split(","))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a point: {text!r}") from None


def _ints(text):
    try:
        return tuple(int(t) for t in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None


def _scrub(obj):
    """Drop timings and make every value JSON-representable and stable."""
    if isinstance(obj, dict):
        return {str(k): _scrub(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, (list, tuple)):
        return [_scrub(v) for v in obj]
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, Fraction):
        return str(obj)
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _scrub(obj.item())
    return obj


def dump_report(report: dict) -> str:
    return json.dumps(_scrub(report), sort_keys=True, indent=2, ensure_ascii=True) + "\n"


def write_csv(path, rows: list):
    if not rows:
        Path(path).write_text("", encoding="ascii")
        return
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols and k not in TIMING_KEYS)
    buf = io.StringIO(newline="")
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _scrub(v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="ascii")


# -- subcommands -------------------------------------------------------------------------

def cmd_generate(a, ifs, store):
    rows = []
    for k in a.levels:
        c = store.get_cover(ifs, k, a.inflation) if store else None
        cached = c is not None
        if c is None:
            c = net_cover(ifs, k, a.inflation, budget=a.budget_cells)
            if store:
                store.put_cover(ifs, k, a.inflation, c)
        rep = verify_approximation(c)
        # cache hits are logged, not reported, so reruns print identical JSON
        log.info("level %d cover %s", k, "read from cache" if cached else "generated")
        rows.append({"level": k, "inflation": str(a.inflation), "balls": len(c), "radius": str(c.level_r),
                     "verified": rep.passed})
    status = "ok" if all(r["verified"] for r in rows) else "failed"
    return {"tables": {"covers": rows}}, rows, status


def cmd_graph(a, ifs, store):
    c = net_cover(ifs, a.level, a.inflation, budget=a.budget_cells)
    g = build_incidence(c)
    row = {"level": a.level, "inflation": str(a.inflation), "connected": g.is_connected()}
    row.update(g.degree_stats())
    return {"tables": {"graph": [row]}}, [row], "ok"


def cmd_modulus(a, ifs, store):
    c = net_cover(ifs, a.level, budget=a.budget_cells)
    center = a.center if a.center is not None else tuple(Fraction(1, 2) for _ in range(ifs.dimension))
    prob = kl_problem(c, Ball(center, a.radius), a.L)
    res = solve_modulus(prob, a.p, rel_tol=a.rel_tol)
    row = {"level": a.level, "p": a.p, "L": str(a.L), "center": ",".join(map(str, center)),
           "radius": str(a.radius), "value": res.value, "status": res.status,
           "bracket_low": res.bracket[0], "bracket_high": res.bracket[1],
           "source": len(prob.source), "target": len(prob.target)}
    return {"tables": {"modulus": [row]}, "result": res.to_dict(), "flags": list(prob.flags)}, [row], res.status


def cmd_strongmod(a, ifs, store):
    from .strong import StrongParams, content_admissible, recheck_witnesses, verify_strong_admissibility
    center = a.center if a.center is not None else tuple(Fraction(1, 2) for _ in range(ifs.dimension))
    fam = clip_family_to_unit_cube(annulus_family(center, a.radius, a.outer, a.count))
    region = Ball(center, a.outer * 2)
    delta = a.delta if a.delta is not None else a.radius / 8
    params = StrongParams(a.tau, a.p)
    sb = content_admissible(fam, region, fam.min_diameter, delta, params)
    ver = verify_strong_admissibility(sb.density, sb.collection, fam, params)
    problems = recheck_witnesses(sb.density, sb.collection, fam, ver)
    ok = all(v.admissible for v in ver.verdicts) and not problems
    row = {"p": a.p, "tau": str(a.tau), "curves": len(fam), "balls": len(sb.collection),
           "upper_value": sb.upper_value, "covering_bound": sb.theoretical_bound,
           "verified": ok, "problems": len(problems)}
    return {"tables": {"strong": [row]}, "result": {"extras": sb.extras, "problems": [list(map(str, p)) for p in problems]}}, \
        [row], "ok" if ok else "failed"


def cmd_pushdown(a, ifs, store):
    from .pushdown import small_modulus_pipeline
    z = a.center if a.center is not None else tuple(Fraction(0) for _ in range(ifs.dimension))
    res = small_modulus_pipeline(ifs, z, a.k, a.p, a.eps, tau=a.tau, eps_cert=a.eps0, max_level=a.max_level,
                                 rel_tol=a.rel_tol)
    rows = [dict(r) for r in res.trace]
    status = "verified" if res.verified else "exhausted"
    return {"tables": {"trace": rows}, "result": res.to_dict()}, rows, status


def cmd_dimension(a, ifs, store):
    from .dimension import estimate_dimension
    est = estimate_dimension(ifs, a.qmin, a.qmax, ks=a.ks, m_max=a.mmax, width=a.width, max_probes=a.max_probes,
                             rel_tol=a.rel_tol, budget=a.budget_cells, cache=store)
    d = est.to_dict()
    rows = [row for t in d["tables"] for row in t["rows"]]
    return {"tables": d["tables"], "bracket": d["bracket"], "result": d}, rows, "ok"


def cmd_clp(a, ifs, store):
    from .dimension import clp_diagnostics
    center = a.center if a.center is not None else tuple(Fraction(1, 2) for _ in range(ifs.dimension))
    prof = clp_diagnostics(ifs, a.p, levels=a.levels, center=center, radius=a.radius, rel_tol=a.rel_tol,
                           budget=a.budget_cells)
    d = prof.to_dict()
    rows = [dict(r, table="phi") for r in d["phi"]] + [dict(r, table="psi") for r in d["psi"]]
    return {"tables": {"phi": d["phi"], "psi": d["psi"]}, "result": d}, rows, \
        "ok" if not d["flags"] else "flagged"


def cmd_verify(a, ifs, store):
    if store is None:
        raise ValueError("verify needs a cache directory")
    systems = list(BUILTIN.values())
    if ifs not in systems:
        systems.append(ifs)
    findings = store.verify(systems, deep=not a.shallow)
    root = str(store.root)
    rows = [dict(f.to_dict(), path=str(Path(f.path).relative_to(root))) for f in findings]
    bad = [r for r in rows if not r["ok"]]
    status = "ok" if not bad else "failed"
    return {"tables": {"findings": rows}, "failing": [f"{r['path']}: {r['invariant']}" for r in bad]}, rows, status


COMMANDS = {
    "generate": cmd_generate, "graph": cmd_graph, "modulus": cmd_modulus, "strongmod": cmd_strongmod,
    "pushdown": cmd_pushdown, "dimension": cmd_dimension, "clp": cmd_clp, "verify": cmd_verify,
}
FAILED_STATUSES = {"failed"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--ifs", default="square", help="builtin name or path to an .ifs file")
    common.add_argument("--out", help="write the JSON report here (default: stdout)")
    common.add_argument("--csv", help="write the main table as CSV")
    common.add_argument("--seed", type=int, default=0, help="recorded for reproducibility; all algorithms are deterministic")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--cache-dir", help="cache directory (default: $CONFMOD_CACHE_DIR or ~/.cache/confmod)")
    common.add_argument("--no-cache", action="store_true")
    common.add_argument("--budget-cells", type=int, default=CELL_BUDGET)
    common.add_argument("--rel-tol", type=float, default=1e-4)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="confmod", description="Discrete conformal-modulus tools on fractal covers.")
    p.add_argument("--version", action="version", version=f"confmod {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", parents=[common], help="build net covers into the cache")
    s.add_argument("--levels", type=_ints, default=(1, 2, 3))
    s.add_argument("--inflation", type=_frac, default=Fraction(1))

    s = sub.add_parser("graph", parents=[common], help="incidence graph statistics")
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--inflation", type=_frac, default=Fraction(1))

    s = sub.add_parser("modulus", parents=[common], help="one chain-modulus solve")
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--L", type=_frac, default=Fraction(2))
    s.add_argument("--center", type=_point)
    s.add_argument("--radius", type=_frac, default=Fraction(1, 4))

    s = sub.add_parser("strongmod", parents=[common], help="covering-based strong bound on an annulus family")
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--tau", type=_frac, default=Fraction(4))
    s.add_argument("--center", type=_point)
    s.add_argument("--radius", type=_frac, default=Fraction(1, 16))
    s.add_argument("--outer", type=_frac, default=Fraction(1, 4))
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--delta", type=_frac)

    s = sub.add_parser("pushdown", parents=[common], help="small-modulus pipeline with push-down plan")
    s.add_argument("--p", type=float, default=3.0)
    s.add_argument("--eps", type=float, default=0.5)
    s.add_argument("--eps0", type=float, default=0.9, help="certificate energy target")
    s.add_argument("--tau", type=_frac, default=Fraction(4))
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--center", type=_point)
    s.add_argument("--max-level", type=int, default=6)

    s = sub.add_parser("dimension", parents=[common], help="conformal-dimension bracket")
    s.add_argument("--qmin", type=float, default=1.5)
    s.add_argument("--qmax", type=float, default=3.0)
    s.add_argument("--mmax", type=int, default=3)
    s.add_argument("--ks", type=_ints, default=(1,))
    s.add_argument("--width", type=float, default=0.4)
    s.add_argument("--max-probes", type=int, default=8)

    s = sub.add_parser("clp", parents=[common], help="CLP diagnostics")
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--levels", type=_ints, default=(2, 3, 4))
    s.add_argument("--center", type=_point)
    s.add_argument("--radius", type=_frac, default=Fraction(1, 4))

    s = sub.add_parser("verify", parents=[common], help="re-audit every cached artifact")
    s.add_argument("--shallow", action="store_true", help="skip the cover approximation audit")
    return p


def _params(a) -> dict:
    skip = {"out", "csv", "cache_dir", "no_cache", "verbose", "command", "threads"}
    return {k: _scrub(v) for k, v in sorted(vars(a).items()) if k not in skip}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    report = {"tool_version": __version__, "command": a.command, "params": _params(a), "ifs_hash": None,
              "tables": {}, "bracket": None, "status": "error"}
    try:
        if a.threads < 1:
            raise ValueError("--threads must be at least 1")
        ifs = resolve_ifs(a.ifs)
        report["ifs_hash"] = ifs.content_hash
        report["ifs_name"] = ifs.name
        store = None if a.no_cache else ArtifactStore(Path(a.cache_dir) if a.cache_dir else default_cache_dir())
        body, rows, status = COMMANDS[a.command](a, ifs, store)
        report.update(body)
        report["status"] = status
        code = 1 if status in FAILED_STATUSES else 0
        if a.csv:
            write_csv(a.csv, rows)
    except Exception as e:  # structured error report, exit 1
        log.debug("command failed", exc_info=True)
        report["error"] = {"type": type(e).__name__, "message": str(e)}
        for attr in ("invariant", "clause"):
            if hasattr(e, attr):
                report["error"][attr] = getattr(e, attr)
        code = 1
    text = dump_report(report)
    if a.out:
        Path(a.out).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    if code:
        msg = report.get("error", {}).get("message") or "; ".join(report.get("failing", [])) or report["status"]
        sys.stderr.write(f"confmod {a.command}: {msg}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
