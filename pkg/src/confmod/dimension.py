"""Conformal-dimension brackets from the decay of chain moduli, and CLP diagnostics.

For an exponent Q the decay table records, for m = 0..m_max, the largest
sampled value of Mod_Q(chains from B(z, b^-k) past B(z, 2 b^-k)) on the
level-(m+k) net cover.  A table whose log-values fall with m is "decaying";
the smallest exponent with decaying tables bounds the dimension from above,
the largest with non-decaying tables from below.  These are finite-scale
surrogates of a liminf and are reported as empirical brackets.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .fractals import CELL_BUDGET, BudgetExceeded, IfsSystem, cell_corners, cell_count, net_cover, resolve_ifs, \
    subcover_in_ball
from .geometry import Ball, PolyCurve, as_fraction, as_point, dist_le, relative_distance
from .incidence import ConnectionProblem, CurveFamilySpec, build_incidence, chain_to_curve, kl_problem, \
    trace_curve, VertexPathOracle
from .modulus import TRIVIAL, solve_modulus
from .strong import StrongAdmissibilityError, StrongParams, clp_bridge_lower, content_admissible

log = logging.getLogger(__name__)

SLOPE_THRESHOLD = 0.05
DECAYING, FLAT, INCONCLUSIVE = "decaying", "flat", "inconclusive"


class DimensionError(RuntimeError):
    def __init__(self, message, tables=None):
        super().__init__(message)
        self.tables = tables or {}


# -- symmetry reduction --------------------------------------------------------

def symmetry_group(ifs: IfsSystem) -> list:
    """Signed coordinate permutations (perm, flips) preserving the kept digit set."""
    d, b = ifs.dimension, ifs.base
    kept = set(ifs.kept_cells)
    out = []
    for perm in itertools.permutations(range(d)):
        for flips in itertools.product((False, True), repeat=d):
            img = {tuple((b - 1 - v[perm[i]]) if flips[i] else v[perm[i]] for i in range(d)) for v in kept}
            if img == kept:
                out.append((perm, flips))
    return out


def _apply(op, idx, top):
    perm, flips = op
    return tuple((top - 1 - idx[perm[i]]) if flips[i] else idx[perm[i]] for i in range(len(idx)))


def center_orbits(ifs: IfsSystem, k: int, reduce: bool = True) -> list:
    """Level-k cell centres, one representative per symmetry orbit; (centre, orbit size)."""
    corners = [tuple(int(v) for v in row) for row in cell_corners(ifs, k)]
    top = ifs.base ** k
    group = symmetry_group(ifs) if reduce else [(tuple(range(ifs.dimension)), (False,) * ifs.dimension)]
    seen, reps = set(), []
    for c in sorted(corners):
        if c in seen:
            continue
        orbit = {_apply(op, c, top) for op in group}
        seen |= orbit
        rep = min(orbit)
        reps.append((tuple(Fraction(2 * v + 1, 2 * top) for v in rep), len(orbit)))
    return reps


# -- decay tables -----------------------------------------------------------------------

@dataclass
class DecayTable:
    Q: float
    ks: tuple
    m_max: int
    values: list                  # per m: max over (z, k)
    per_k: dict                   # k -> per-m max over z
    argmax: list                  # per m: (k, z)
    statuses: list                # per m: worst solver status seen
    partial: bool = False
    seconds: float = 0.0
    samples: dict = field(default_factory=dict)

    def slope(self, m_from: int = 1):
        ms = [m for m in range(m_from, len(self.values)) if self.values[m] > 0]
        if len(ms) < 2:
            return None
        y = [math.log(self.values[m]) for m in ms]
        return float(np.polyfit(ms, y, 1)[0])

    def classify(self, threshold: float = SLOPE_THRESHOLD) -> str:
        s = self.slope()
        if s is None:
            return INCONCLUSIVE
        if s < -threshold:
            return DECAYING
        if s > threshold:
            return FLAT
        return INCONCLUSIVE

    def rows(self) -> list:
        out = []
        for m, v in enumerate(self.values):
            k, z = self.argmax[m]
            out.append({"Q": self.Q, "m": m, "value": v, "k": k, "z": ",".join(str(c) for c in z),
                        "status": self.statuses[m]})
        return out

    def to_dict(self) -> dict:
        return {"Q": self.Q, "ks": list(self.ks), "m_max": self.m_max, "values": self.values,
                "per_k": {str(k): v for k, v in self.per_k.items()}, "rows": self.rows(),
                "partial": self.partial, "slope": self.slope(), "status": self.classify(),
                "samples": self.samples}


_STATUS_RANK = {"optimal": 0, "trivial-no-path": 0, "iteration-cap": 1, "infeasible-empty-constraint": 2}


def decay_table(ifs, Q: float, ks=(1, 2), m_max: int = 4, rel_tol: float = 1e-3, budget: int = CELL_BUDGET,
                symmetric: bool = True, m_min: int = 0, cache=None) -> DecayTable:
    """Max over sampled (z, k) of the chain modulus at level m+k, for m = m_min..m_max.

    ``cache`` is an optional mapping-like object (get/put) keyed by the
    problem description; cached cells are reused bit-identically.
    """
    Q = float(Q)
    if not (1 < Q <= 8):
        raise ValueError("Q must lie in (1, 8]")
    ifs = resolve_ifs(ifs)
    t0 = time.perf_counter()
    values, argmax, statuses = [], [], []
    per_k = {k: [] for k in ks}
    partial = False
    orbits = {k: center_orbits(ifs, k, symmetric) for k in ks}
    for m in range(m_min, m_max + 1):
        best, best_at, worst = -1.0, None, "optimal"
        for k in ks:
            level = m + k
            if cell_count(ifs, level) > budget:
                partial = True
                break
            c = None
            kbest = -1.0
            for z, _ in orbits[k]:
                key = f"decay|{ifs.content_hash}|{Q!r}|{level}|{k}|{','.join(map(str, z))}|{rel_tol!r}"
                hit = cache.get(key) if cache is not None else None
                if hit is not None:
                    val, st = hit["value"], hit["status"]
                else:
                    if c is None:
                        c = net_cover(ifs, level, budget=budget)
                    res = solve_modulus(kl_problem(c, Ball(z, Fraction(1, ifs.base ** k)), 2), Q, rel_tol=rel_tol)
                    val, st = float(res.value), res.status
                    if cache is not None:
                        cache.put(key, {"value": val, "status": st})
                if _STATUS_RANK.get(st, 3) > _STATUS_RANK.get(worst, 3):
                    worst = st
                kbest = max(kbest, val)
                if val > best:
                    best, best_at = val, (k, z)
            per_k[k].append(kbest)
        if partial:
            break
        values.append(best)
        argmax.append(best_at)
        statuses.append(worst)
        log.info("decay Q=%.4g m=%d value=%.6g", Q, m, best)
    samples = {str(k): len(orbits[k]) for k in ks}
    if m_min > 0:
        # keep m indexing aligned with the row position
        values = [math.nan] * m_min + values
        argmax = [(None, ())] * m_min + argmax
        statuses = ["skipped"] * m_min + statuses
        for k in ks:
            per_k[k] = [math.nan] * m_min + per_k[k]
    return DecayTable(Q, tuple(ks), m_max, values, per_k, argmax, statuses, partial,
                      time.perf_counter() - t0, samples)


# -- dimension brackets -----------------------------------------------------------------

@dataclass
class DimensionEstimate:
    q_low: float
    q_high: float
    tables: dict
    status: dict
    sample: str
    flags: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def width(self) -> float:
        return self.q_high - self.q_low

    def to_dict(self) -> dict:
        return {"bracket": [self.q_low, self.q_high], "width": self.width,
                "status": {repr(q): s for q, s in sorted(self.status.items())},
                "tables": [self.tables[q].to_dict() for q in sorted(self.tables)],
                "sample": self.sample, "flags": list(self.flags)}


def estimate_dimension(ifs, qmin: float = 1.5, qmax: float = 3.0, ks=(1, 2), m_max: int = 4,
                       width: float = 0.4, max_probes: int = 8, min_gap: float = 0.05,
                       rel_tol: float = 1e-3, budget: int = CELL_BUDGET, threshold: float = SLOPE_THRESHOLD,
                       cache=None) -> DimensionEstimate:
    """Bisection on Q between a non-decaying and a decaying exponent.

    The bracket is [greatest flat Q, least decaying Q].  When ``qmin`` is at
    most 1 it is not probed and 1 serves as the lower end; when no probed Q
    decays the upper end is 8.  Inconclusive probes stay inside the bracket.
    """
    t0 = time.perf_counter()
    ifs = resolve_ifs(ifs)
    tables, status = {}, {}
    flags = []

    def probe(q):
        q = round(float(q), 6)
        if q not in status:
            tab = decay_table(ifs, q, ks, m_max, rel_tol, budget, cache=cache)
            tables[q] = tab
            status[q] = tab.classify(threshold)
            if tab.partial:
                flags.append(f"Q={q}: table truncated by the cell budget")
        return status[q]

    if qmin > 1:
        probe(qmin)
    probe(qmax)

    def bracket():
        flat = [q for q, s in status.items() if s == FLAT]
        dec = [q for q, s in status.items() if s == DECAYING]
        hi = min(dec) if dec else 8.0
        lows = [q for q in flat if q < hi]
        lo = max(lows) if lows else 1.0
        return lo, hi

    probes = len(status)
    while probes < max_probes:
        lo, hi = bracket()
        if hi - lo <= width:
            break
        pts = sorted({lo, hi} | {q for q in status if lo < q < hi})
        gaps = [(b - a, a, b) for a, b in zip(pts, pts[1:]) if b - a > min_gap]
        if not gaps:
            break
        _, a, b = max(gaps)
        probe((a + b) / 2)
        probes += 1
    if not any(s != INCONCLUSIVE for s in status.values()):
        raise DimensionError("every probed exponent was inconclusive", tables)
    lo, hi = bracket()
    if not any(s == DECAYING for s in status.values()):
        flags.append("no decaying exponent observed; upper end set to 8")
    if not any(s == FLAT and q < hi for q, s in status.items()):
        flags.append("no non-decaying exponent below the upper end; lower end set to 1")
    if any(s == FLAT and q > hi for q, s in status.items()):
        flags.append("non-monotone classification: a flat exponent lies above a decaying one")
    sample = (f"all level-k cell centres up to symmetry, k in {list(ks)}, m = 0..{m_max}, L = 2, "
              f"slope threshold {threshold}")
    return DimensionEstimate(lo, hi, tables, status, sample, flags, time.perf_counter() - t0)


# -- condensers and CLP diagnostics ------------------------------------------------------------

def condenser_problem(c, E: PolyCurve, F: PolyCurve) -> ConnectionProblem:
    """Chains from the balls meeting E to the balls meeting F."""
    src = trace_curve(E, c)
    tgt = trace_curve(F, c)
    g = build_incidence(c)
    trivial = not src or not tgt
    reason = "a continuum misses the cover" if trivial else ""
    flags = ("source-target overlap",) if set(src) & set(tgt) else ()
    anchor = Ball(E.vertices[0], Fraction(1, 2))
    return ConnectionProblem(g, tuple(src), tuple(tgt), anchor, Fraction(2), c, trivial, reason, flags)


@dataclass
class ClpProfile:
    p: float
    levels: tuple
    phi_rows: list
    psi_rows: list
    flags: list

    def to_dict(self) -> dict:
        return {"p": self.p, "levels": list(self.levels), "phi": self.phi_rows, "psi": self.psi_rows,
                "flags": self.flags}


def _default_condensers(x, r, gaps):
    """Parallel vertical segments of length 2r; the second sits gap * 2r to the right."""
    x = as_point(x)
    r = as_fraction(r)
    out = []
    for gap in gaps:
        left = x[0] - r
        E = PolyCurve(((left, x[1] - r), (left, x[1] + r)))
        F = PolyCurve(((left + 2 * r * gap, x[1] - r), (left + 2 * r * gap, x[1] + r)))
        out.append((E, F))
    return out


def clp_diagnostics(ifs, p: float, levels=(2, 3, 4), center=(Fraction(1, 2), Fraction(1, 2)), radius=Fraction(1, 4),
                    condensers=None, gaps=(Fraction(1, 3), Fraction(1, 2), Fraction(1)), annulus_radius=None,
                    separations=(1, Fraction(1, 2), Fraction(1, 4)), rel_tol: float = 1e-4,
                    budget: int = CELL_BUDGET) -> ClpProfile:
    """Empirical phi (condenser) and psi (annulus) tables across levels.

    Condition-(1) rows are condenser moduli for segment pairs; condition-(2)
    rows are annulus moduli Mod(B(x,a) -> outside B(x,R)) indexed by the
    separation t = a/(R-a), with a = ``annulus_radius`` (default radius/4).  Values drifting by more than a factor 2 across levels,
    and psi increasing as the separation shrinks, are flagged.
    """
    ifs = resolve_ifs(ifs)
    x = as_point(center)
    r = as_fraction(radius)
    pairs = list(condensers) if condensers is not None else _default_condensers(x, r, gaps)
    a_rad = as_fraction(annulus_radius) if annulus_radius is not None else r / 4
    phi_rows, psi_rows, flags = [], [], []
    covers = {}
    for k in levels:
        if cell_count(ifs, k) > budget:
            flags.append(f"level {k} exceeds the cell budget")
            continue
        covers[k] = net_cover(ifs, k, budget=budget)
    for i, (E, F) in enumerate(pairs):
        if relative_distance(E, F) == 0.0:
            flags.append(f"condenser {i}: continua touch (precondition violated)")
            continue
        delta = relative_distance(E, F)
        vals = {}
        for k, c in covers.items():
            res = solve_modulus(condenser_problem(c, E, F), p, rel_tol=rel_tol)
            vals[k] = res.value
            phi_rows.append({"condenser": i, "relative_distance": delta, "inverse": 1 / delta, "level": k,
                             "value": res.value, "status": res.status})
        pos = [v for v in vals.values() if v > 0]
        if pos and max(pos) > 2 * min(pos):
            flags.append(f"condenser {i}: values drift by more than 2x across levels (CLP-suspicious)")
    for k, c in covers.items():
        prev = None
        for t in sorted((as_fraction(s) for s in separations), reverse=True):
            L = 1 + 1 / t
            res = solve_modulus(kl_problem(c, Ball(x, a_rad), L), p, rel_tol=rel_tol)
            psi_rows.append({"level": k, "separation": str(t), "L": str(L), "value": res.value,
                             "status": res.status})
            if prev is not None and res.value > prev * (1 + 1e-6) + 1e-12:
                flags.append(f"level {k}: psi increased when separation fell to {t}")
            prev = res.value
    by_t = {}
    for row in psi_rows:
        by_t.setdefault(row["separation"], []).append(row["value"])
    for t, vals in by_t.items():
        pos = [v for v in vals if v > 0]
        if pos and max(pos) > 2 * min(pos):
            flags.append(f"annulus separation {t}: values drift by more than 2x across levels (CLP-suspicious)")
    return ClpProfile(float(p), tuple(covers), phi_rows, psi_rows, flags)


# -- Hausdorff lower-bound harness -----------------------------------------------------------------

def _first_level(b: int, bound) -> int:
    k = 1
    while Fraction(1, b ** k) > bound:
        k += 1
    return k


def hausdorff_lower_harness(ifs, p: float, x, r, fine_level: int | None = None, coarse_level: int | None = None, tau=4,
                            L_max: int = 8, witness_count: int = 6, rel_tol: float = 1e-4,
                            budget: int = CELL_BUDGET) -> dict:
    """Replay the lower bound for the p-Hausdorff measure of a ball, step by step.

    A) condenser value phi for E (through x) and F (in the 3r..4r shell), the
       smallest L with annulus modulus <= phi/2, and the modulus of the chains
       kept inside B(x, L r), which must be at least phi/2;
    B) the covering-based strong bound on witness curves of that good family;
    C) the composite bridge from a coarse ball collection to the fine level.
    The implied constant is (phi/2) / ((20 tau)^p * C_bridge), a lower bound
    for H^p(B(x, L r)) / r^p up to the covering slack.
    """
    ifs = resolve_ifs(ifs)
    x = as_point(x)
    r = as_fraction(r)
    if not (0 < r and 64 * r * r < ifs.dimension):
        raise ValueError("r must lie in (0, diam/8)")
    report = {"p": float(p), "x": [str(c) for c in x], "r": str(r), "steps": {}, "failed_step": None}
    E = PolyCurve(((x[0], x[1]), (x[0] - 3 * r / 4, x[1])))
    F = PolyCurve(((x[0] + 3 * r, x[1]), (x[0] + 4 * r, x[1])))
    for v in E.vertices + F.vertices:
        if not all(0 <= c <= 1 for c in v):
            raise ValueError("continua leave the unit cube; choose x farther from the boundary")
    # witness curves join E to F, so their diameter is at least 2r; coarse balls
    # must be short against them and fine balls at most half as large
    tau_f = as_fraction(tau)
    if coarse_level is None:
        coarse_level = _first_level(ifs.base, r / tau_f)
    if fine_level is None:
        fine_level = max(coarse_level + 1, _first_level(ifs.base, 3 * r / 8))
    if Fraction(1, ifs.base ** fine_level) > 3 * r / 8:
        raise ValueError("fine level too coarse for the continua")
    if fine_level <= coarse_level:
        raise ValueError("fine level must be deeper than the coarse level")
    report["levels"] = {"fine": fine_level, "coarse": coarse_level}
    c = net_cover(ifs, fine_level, budget=budget)
    phi = solve_modulus(condenser_problem(c, E, F), p, rel_tol=rel_tol)
    A = {"phi": phi.value, "phi_status": phi.status, "relative_distance": relative_distance(E, F)}
    L_found, psi_val = None, None
    for L in range(2, L_max + 1):
        res = solve_modulus(kl_problem(c, Ball(x, r), L), p, rel_tol=rel_tol)
        if res.status == TRIVIAL or res.value <= phi.value / 2:
            L_found, psi_val = L, res.value
            break
    A["L"] = L_found
    A["psi"] = psi_val
    if L_found is None or phi.value <= 0:
        A["ok"] = False
        report["steps"]["A"] = A
        report["failed_step"] = "A"
        report["implied_constant"] = None
        return report
    region = Ball(x, L_found * r)
    sub = subcover_in_ball(c, region, mode="intersects")
    good = solve_modulus(condenser_problem(sub, E, F), p, rel_tol=rel_tol)
    A["good_modulus"] = good.value
    A["ok"] = bool(good.value >= phi.value / 2 * (1 - 1e-9))
    report["steps"]["A"] = A
    if not A["ok"]:
        report["failed_step"] = "A"
        report["implied_constant"] = None
        return report

    # witness curves of the good family: shortest chains, turned into polylines
    prob = condenser_problem(sub, E, F)
    oracle = VertexPathOracle(prob.graph, prob.source, prob.target)
    wts = np.ones(prob.graph.n)
    curves = []
    for _ in range(4 * witness_count):
        found = oracle.shortest(wts, k=1)
        if not found or len(curves) >= witness_count:
            break
        _, chain = found[0]
        wts[list(chain)] += prob.graph.n
        g = chain_to_curve(chain, sub, prob.graph)
        if all(dist_le(v, region.center, region.base_radius) for v in g.vertices) and g.diameter_at_least(2 * r):
            curves.append(g)
    fam = CurveFamilySpec(tuple(curves), 2 * r, f"good-witness:{len(curves)}")
    B = {"curves": len(curves)}
    params = StrongParams(tau, p)
    delta = r / (8 * as_fraction(tau))
    try:
        sb = content_admissible(fam, region, r, delta, params)
        B.update({"strong_energy": sb.upper_value, "covering_bound": sb.theoretical_bound,
                  "sum_diam_p": sb.extras["sum_diam_p"], "ok": bool(sb.upper_value <= sb.theoretical_bound)})
    except (StrongAdmissibilityError, ValueError) as e:
        B.update({"ok": False, "error": str(e)})
    report["steps"]["B"] = B
    if not B["ok"]:
        report["failed_step"] = "B"
        report["implied_constant"] = None
        return report

    v = net_cover(ifs, coarse_level, budget=budget)
    v = subcover_in_ball(v, region, mode="intersects")
    Cst = {}
    try:
        br = clp_bridge_lower(c, v, fam, p, tau, rel_tol=rel_tol)
        Cst.update({k: br[k] for k in ("admissible", "energy", "bound", "psi", "holds", "strong_upper")})
        Cst["ok"] = bool(br["admissible"] and br["holds"])
        Cst["C_bridge"] = 2 * br["psi"]
    except (ValueError, StrongAdmissibilityError) as e:
        Cst.update({"ok": False, "error": str(e)})
    report["steps"]["C"] = Cst
    if not Cst["ok"]:
        report["failed_step"] = "C"
        report["implied_constant"] = None
        return report
    const = (phi.value / 2) / ((20 * float(tau)) ** p * max(Cst["C_bridge"], 1e-300))
    report["implied_constant"] = const
    report["ball_radius_factor"] = L_found
    return report
