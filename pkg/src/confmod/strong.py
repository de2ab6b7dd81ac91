"""Strong (packing) admissibility, certified upper bounds and bridge checks.

A density rho on a ball collection is strongly tau-admissible for a curve
family when every curve meets a subcollection whose tau-inflated balls are
pairwise disjoint and whose rho-sum is at least one.  Deciding this per curve
is a maximum-weight independent set problem on the conflict graph of the
curve's trace; it is solved exactly for small traces and greedily otherwise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fractals import CoverApproximation, cover_from_balls, subcover_in_ball
from .geometry import (EUCLIDEAN, Ball, PolyCurve, as_fraction, ball_meets_curve, balls_intersect,
                       dist_le, hausdorff_content_upper, snowflake)
from .incidence import CurveFamilySpec, kl_problem, trace_curve, traces_constraints
from .modulus import Density, solve_modulus

log = logging.getLogger(__name__)

EXACT_LIMIT = 64
NODE_LIMIT = 2_000_000
SUM_SLACK = 1e-9


class StrongAdmissibilityError(RuntimeError):
    """A construction that should be strongly admissible failed verification."""

    def __init__(self, message, verdicts=()):
        super().__init__(message)
        self.verdicts = tuple(verdicts)


@dataclass(frozen=True)
class StrongParams:
    tau: object = 4
    p: float = 2.0

    def __post_init__(self):
        tau = self.tau if isinstance(self.tau, float) else as_fraction(self.tau)
        if not tau >= 4:
            raise ValueError("tau must be at least 4")
        if not float(self.p) >= 1:
            raise ValueError("p must be at least 1")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "p", float(self.p))


@dataclass(frozen=True)
class CurveVerdict:
    """Outcome for one curve.

    ``method`` is one of ``exact``, ``greedy``, ``greedy only`` (greedy
    failure, inconclusive), ``bounded search`` (exact search hit its node
    cap) or ``empty trace``.
    """

    curve: int
    admissible: bool
    witness: tuple
    weight: float
    method: str

    @property
    def conclusive(self) -> bool:
        return self.admissible or self.method in ("exact", "empty trace")


@dataclass(frozen=True)
class StrongVerification:
    verdicts: tuple
    tau: object
    p: float

    @property
    def admissible(self) -> bool:
        return all(v.admissible for v in self.verdicts)

    @property
    def failures(self) -> list:
        return [v for v in self.verdicts if not v.admissible]

    @property
    def min_weight(self) -> float:
        return min((v.weight for v in self.verdicts), default=math.inf)

    def witness_dump(self, rho: Density | None = None) -> str:
        return witness_dump(self, rho)


@dataclass(frozen=True, eq=False)
class StrongModulusBound:
    """Certified upper bound on the strong modulus of a curve family."""

    upper_value: float
    density: Density
    collection: CoverApproximation
    verified_on: str
    packing_witnesses: tuple
    tau: object
    p: float
    theoretical_bound: float | None = None
    family: CurveFamilySpec | None = None
    extras: dict = field(default_factory=dict)

    def verification(self) -> StrongVerification:
        return StrongVerification(self.packing_witnesses, self.tau, self.p)


# -- packing primitives ---------------------------------------------------------

def inflations_disjoint(a: Ball, b: Ball, tau, norm: str = EUCLIDEAN) -> bool:
    """True when B(z_a, tau r_a) and B(z_b, tau r_b) do not meet."""
    return not balls_intersect(a.inflate(tau), b.inflate(tau), norm)


def _conflicts(balls, idx, tau, norm):
    masks = [0] * len(idx)
    for a in range(len(idx)):
        ua = balls[idx[a]]
        for b in range(a + 1, len(idx)):
            if not inflations_disjoint(ua, balls[idx[b]], tau, norm):
                masks[a] |= 1 << b
                masks[b] |= 1 << a
    return masks


def max_weight_packing(weights, conflicts, target=None, node_limit: int = NODE_LIMIT):
    """Branch and bound for a maximum-weight independent set.

    ``conflicts[i]`` is the bitmask of vertices adjacent to i.  Stops early once
    ``target`` is reached.  Returns (weight, members, complete).
    """
    n = len(weights)
    order = sorted(range(n), key=lambda i: (-weights[i], i))
    pos = {v: k for k, v in enumerate(order)}
    w = [float(weights[v]) for v in order]
    conf = [0] * n
    for v in range(n):
        m = 0
        for u in range(n):
            if conflicts[v] >> u & 1:
                m |= 1 << pos[u]
        conf[pos[v]] = m
    best_w, best_set = 0.0, 0
    nodes = 0
    done = False

    def mask_sum(mask):
        s = 0.0
        while mask:
            low = mask & -mask
            s += w[low.bit_length() - 1]
            mask ^= low
        return s

    # explicit stack keeps deep traces clear of the recursion limit
    stack = [((1 << n) - 1, 0.0, 0)]
    while stack and not done:
        cand, cur, chosen = stack.pop()
        nodes += 1
        if cur > best_w:
            best_w, best_set = cur, chosen
            if target is not None and best_w >= target:
                done = True
                break
        if not cand or nodes > node_limit:
            continue
        if cur + mask_sum(cand) <= best_w:
            continue
        low = cand & -cand
        i = low.bit_length() - 1
        stack.append((cand & ~low, cur, chosen))
        stack.append((cand & ~low & ~conf[i], cur + w[i], chosen | low))
    complete = done or nodes <= node_limit
    members = tuple(sorted(order[k] for k in range(n) if best_set >> k & 1))
    return best_w, members, complete


def _greedy_packing(balls, idx, weights, tau, norm, key=None):
    order = sorted(range(len(idx)), key=key or (lambda k: (-weights[k], idx[k])))
    chosen = []
    for k in order:
        u = balls[idx[k]]
        if all(inflations_disjoint(u, balls[idx[j]], tau, norm) for j in chosen):
            chosen.append(k)
    return sum(weights[k] for k in chosen), tuple(sorted(chosen))


def verify_curve(rho: Density, c: CoverApproximation, gamma: PolyCurve, tau, index: int = 0,
                 trace=None, exact_limit: int = EXACT_LIMIT) -> CurveVerdict:
    trace = trace_curve(gamma, c) if trace is None else trace
    idx = [int(i) for i in trace if rho[i] > 0]
    if not idx:
        return CurveVerdict(index, False, (), 0.0, "empty trace")
    weights = [rho[i] for i in idx]
    goal = 1 - SUM_SLACK
    if sum(weights) < goal:
        # even the whole trace cannot reach 1, so the failure is certain
        if len(idx) <= exact_limit:
            wt, mem, _ = max_weight_packing(weights, _conflicts(c.balls, idx, tau, c.norm))
        else:
            wt, mem = _greedy_packing(c.balls, idx, weights, tau, c.norm)
        return CurveVerdict(index, False, tuple(idx[k] for k in mem), wt, "exact")
    if len(idx) <= exact_limit:
        wt, mem, complete = max_weight_packing(weights, _conflicts(c.balls, idx, tau, c.norm), target=goal)
        ok = wt >= goal
        method = "exact" if (ok or complete) else "bounded search"
        return CurveVerdict(index, ok, tuple(idx[k] for k in mem), wt, method)
    wt, mem = _greedy_packing(c.balls, idx, weights, tau, c.norm)
    ok = wt >= goal
    return CurveVerdict(index, ok, tuple(idx[k] for k in mem), wt, "greedy" if ok else "greedy only")


def verify_strong_admissibility(rho: Density, c: CoverApproximation, fam: CurveFamilySpec,
                                params: StrongParams, exact_limit: int = EXACT_LIMIT) -> StrongVerification:
    """Per-curve packing search; every curve must have a nonempty trace."""
    if len(rho) != len(c.balls):
        raise ValueError("density length does not match the collection")
    verdicts = []
    for i, g in enumerate(fam.curves):
        tr = trace_curve(g, c)
        if not tr:
            raise ValueError(f"curve {i} has an empty trace in the collection")
        verdicts.append(verify_curve(rho, c, g, params.tau, i, tr, exact_limit))
    return StrongVerification(tuple(verdicts), params.tau, params.p)


def recheck_witnesses(rho: Density, c: CoverApproximation, fam: CurveFamilySpec, verification: StrongVerification,
                      tau=None) -> list:
    """Independent O(n^2) audit of the stored witnesses; returns a list of problems."""
    tau = verification.tau if tau is None else tau
    problems = []
    for v in verification.verdicts:
        if not v.admissible:
            continue
        g = fam.curves[v.curve]
        members = [c.balls[i] for i in v.witness]
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                if not inflations_disjoint(members[a], members[b], tau, c.norm):
                    problems.append((v.curve, "inflations meet", v.witness[a], v.witness[b]))
        for i, u in zip(v.witness, members):
            if not ball_meets_curve(u, g, c.norm) and i not in trace_curve(g, c):
                problems.append((v.curve, "misses curve", i))
        if sum(rho[i] for i in v.witness) < 1 - SUM_SLACK:
            problems.append((v.curve, "sum below one"))
    return problems


def witness_dump(verification: StrongVerification, rho: Density | None = None) -> str:
    lines = [f"# strong-witnesses tau={verification.tau} p={verification.p}"]
    for v in verification.verdicts:
        parts = []
        for i in v.witness:
            parts.append(f"{i}:{rho[i]:.12g}" if rho is not None else str(i))
        status = "ok" if v.admissible else "fail"
        lines.append(f"curve {v.curve} {status} method={v.method} weight={v.weight:.12g} witnesses={','.join(parts)}")
    return "\n".join(lines) + "\n"


# -- constructions --------------------------------------------------------------

def _inside_region(g: PolyCurve, region: Ball, norm: str) -> bool:
    # a polyline lies in a (convex) closed ball iff its vertices do
    return all(dist_le(v, region.center, region.base_radius, norm) for v in g.vertices)


def _dedupe_balls(balls):
    seen, out = set(), []
    for b in balls:
        key = (b.center, b.radius, b.metric_exponent)
        if key not in seen:
            seen.add(key)
            out.append(b)
    return out


def content_admissible(fam: CurveFamilySpec, region: Ball, r, delta, params: StrongParams,
                       eps: float = 0.0, norm: str = EUCLIDEAN) -> StrongModulusBound:
    """Strong density rho(V) = 10 tau diam(V) / r on a fine cover of the curves.

    The per-curve packing is the greedy largest-first selection of the
    Vitali covering argument.  Raises StrongAdmissibilityError if a curve
    fails, which signals a defect in the cover rather than a property of the
    family.
    """
    if not fam.curves:
        raise ValueError("empty curve family")
    r = as_fraction(r)
    if not r > 0:
        raise ValueError("minimum diameter must be positive")
    for i, g in enumerate(fam.curves):
        if not _inside_region(g, region, norm):
            raise ValueError(f"curve {i} leaves the region")
        if not g.diameter_at_least(r, norm):
            raise ValueError(f"curve {i} has diameter below r")
    tau, p = params.tau, params.p
    content = hausdorff_content_upper(fam.curves, p, delta)
    balls = [b for b in _dedupe_balls(content.cover)
             if balls_intersect(b, region, norm) and any(ball_meets_curve(b, g, norm) for g in fam.curves)]
    coll = cover_from_balls(balls, kappa=1, label="content")
    coll = coll.with_balls(coll.balls, norm=norm)
    diams = np.array([float(b.diameter(norm)) for b in coll.balls])
    rho = Density(10 * float(tau) * diams / float(r))
    verdicts = []
    for i, g in enumerate(fam.curves):
        tr = list(trace_curve(g, coll))
        w = [rho[k] for k in tr]
        wt, mem = _greedy_packing(coll.balls, tr, w, tau, norm,
                                  key=lambda k: (-float(coll.balls[tr[k]].base_radius), tr[k]))
        ok = wt >= 1 - SUM_SLACK
        verdicts.append(CurveVerdict(i, ok, tuple(tr[k] for k in mem), wt, "greedy-vitali"))
    bad = [v for v in verdicts if not v.admissible]
    if bad:
        log.warning("content construction failed on curves %s", [v.curve for v in bad])
        raise StrongAdmissibilityError(f"{len(bad)} curve(s) failed the covering packing", verdicts)
    sum_diam = float(np.sum(diams ** p))
    bound = (20 * float(tau)) ** p * (sum_diam + eps) / float(r) ** p
    return StrongModulusBound(
        upper_value=rho.energy(p), density=rho, collection=coll, verified_on=fam.descriptor,
        packing_witnesses=tuple(verdicts), tau=tau, p=p, theoretical_bound=bound, family=fam,
        extras={"sum_diam_p": sum_diam, "content": content.value, "delta": float(delta), "eps": eps})


def strong_upper_bound(v: CoverApproximation, fam: CurveFamilySpec, params: StrongParams,
                       rel_tol: float | None = None) -> StrongModulusBound:
    """Scale the optimal ordinary density on v's traces until every curve packs.

    The scale is 1 / (smallest packing weight), which the re-verification
    then confirms.  Requires every curve to have a nonempty trace in v.
    """
    p = params.p
    if not fam.curves:
        return StrongModulusBound(0.0, Density(np.zeros(len(v.balls))), v, fam.descriptor, (), params.tau, p)
    res = solve_modulus(traces_constraints(fam, v), p, rel_tol=rel_tol)
    rho = res.optimal_density
    ver = verify_strong_admissibility(rho, v, fam, params)
    if not ver.admissible:
        wmin = min(x.weight for x in ver.verdicts)
        if not wmin > 0:
            raise StrongAdmissibilityError("a curve has no positively weighted trace element", ver.verdicts)
        rho = Density(rho.weights / wmin * (1 + 4 * SUM_SLACK))
        ver = verify_strong_admissibility(rho, v, fam, params)
        if not ver.admissible:
            raise StrongAdmissibilityError("rescaled density failed re-verification", ver.verdicts)
    return StrongModulusBound(rho.energy(p), rho, v, fam.descriptor, ver.verdicts, params.tau, p, family=fam,
                              extras={"plain_modulus": res.value, "plain_status": res.status})


# -- bridges --------------------------------------------------------------------

def _meeting_lists(a: CoverApproximation, b: CoverApproximation):
    """For each ball of a, indices of balls of b it meets (open balls)."""
    if not a.balls or not b.balls:
        return [[] for _ in a.balls]
    reach = float(a.radii_f.max() + b.radii_f.max())
    pnorm = 2 if a.norm == EUCLIDEAN else np.inf
    near = b.tree.query_ball_point(a.centers_f, reach * (1 + 1e-9) + 1e-15, p=pnorm)
    out = []
    for i, cand in enumerate(near):
        u = a.balls[i]
        out.append(sorted(j for j in cand if balls_intersect(u, b.balls[j], a.norm)))
    return out


def _level_radius(c: CoverApproximation):
    if c.level_r is not None:
        return c.level_r
    return max(b.base_radius for b in c.balls)


def bridge_lower(c_fine: CoverApproximation, v: CoverApproximation, fam: CurveFamilySpec, p: float,
                 tau=4, kappa=None, rel_tol: float | None = None) -> dict:
    """Check Mod_p(traces on c_fine) <= D^(p+1) * (strong upper bound on v)."""
    params = StrongParams(tau, p)
    r = _level_radius(c_fine)
    kappa = as_fraction(v.kappa if kappa is None else kappa)
    for b in v.balls:
        if not (r / kappa <= b.base_radius <= r):
            raise ValueError(f"radius window violated: {b.base_radius} not in [{r}/{kappa}, {r}]")
    if not fam.curves:
        return {"fine_modulus": 0.0, "strong_upper": 0.0, "D": 0, "C": 0.0, "slack": 0.0, "holds": True,
                "composite_admissible": True, "composite_energy": 0.0}
    fine = solve_modulus(traces_constraints(fam, c_fine), p, rel_tol=rel_tol)
    strong = strong_upper_bound(v, fam, params, rel_tol=rel_tol)
    meets = _meeting_lists(c_fine, v)
    per_v = [0] * len(v.balls)
    for lst in meets:
        for j in lst:
            per_v[j] += 1
    D = max(max((len(x) for x in meets), default=0), max(per_v, default=0), 1)
    C = float(D) ** (p + 1)
    rb = strong.density.weights
    comp = np.array([D * max((rb[j] for j in lst), default=0.0) for lst in meets])
    sums = [comp[list(trace_curve(g, c_fine))].sum() for g in fam.curves]
    comp_energy = float(np.sum(comp ** p))
    upper = strong.upper_value
    return {
        "fine_modulus": fine.value, "fine_status": fine.status, "strong_upper": upper, "D": D, "C": C,
        "slack": C * upper - fine.value, "holds": fine.value <= C * upper * (1 + 1e-9) + 1e-12,
        "composite_admissible": bool(min(sums) >= 1 - SUM_SLACK), "composite_min_sum": float(min(sums)),
        "composite_energy": comp_energy, "composite_energy_ok": comp_energy <= C * upper * (1 + 1e-9) + 1e-12,
    }


def clp_bridge_lower(c_fine: CoverApproximation, v: CoverApproximation, fam: CurveFamilySpec, p: float,
                     tau=4, psi: float | None = None, rel_tol: float = 1e-4) -> dict:
    """Composite density rho(U) = max_V rho_V(U) * rho_bar(V) from solved annulus densities.

    rho_V is the optimal density of the chain problem from the closed ball
    B(z_V, r_V) to the complement of B(z_V, (tau-1) r_V) on c_fine.
    """
    params = StrongParams(tau, p)
    r = _level_radius(c_fine)
    if any(b.base_radius < 2 * r for b in v.balls):
        raise ValueError("hypothesis violated: coarse radii must be at least twice the fine level radius")
    rmax = max(b.base_radius for b in v.balls)
    for i, g in enumerate(fam.curves):
        if not g.diameter_at_least(2 * params.tau * rmax, c_fine.norm):
            raise ValueError(f"hypothesis violated: curve {i} is shorter than 2 tau max radius")
    if not fam.curves:
        return {"admissible": True, "energy": 0.0, "bound": 0.0, "psi": 0.0, "holds": True}
    strong = strong_upper_bound(v, fam, params)
    rb = strong.density.weights
    comp = np.zeros(len(c_fine.balls))
    annulus = []
    index = {b: i for i, b in enumerate(c_fine.balls)}
    reach = 2 * max(b.base_radius for b in c_fine.balls)
    for j, V in enumerate(v.balls):
        if rb[j] <= 0:
            continue
        # every minimal chain stays within one fine diameter of (tau-1)V
        local = subcover_in_ball(c_fine, Ball(V.center, (params.tau - 1) * V.base_radius + reach))
        prob = kl_problem(local, Ball(V.center, V.base_radius), params.tau - 1)
        res = solve_modulus(prob, p, rel_tol=rel_tol)
        annulus.append(res.value)
        if res.optimal_density is not None and len(res.optimal_density):
            idx = np.array([index[b] for b in local.balls])
            comp[idx] = np.maximum(comp[idx], res.optimal_density.weights * rb[j])
    C = max(annulus, default=0.0) if psi is None else float(psi)
    sums = [comp[list(trace_curve(g, c_fine))].sum() for g in fam.curves]
    energy = float(np.sum(comp ** p))
    bound = 2 * C * strong.upper_value
    return {
        "admissible": bool(min(sums) >= 1 - 1e-6), "min_sum": float(min(sums)), "energy": energy,
        "strong_upper": strong.upper_value, "psi": C, "bound": bound, "holds": energy <= bound * (1 + 1e-9),
        "annulus_moduli": annulus,
    }


# -- snowflake transport --------------------------------------------------------

def snowflake_tau(tau, theta) -> float:
    """Adjusted inflation max{4, (2 tau)**theta} for the map d -> d**theta."""
    return max(4.0, (2 * float(tau)) ** float(theta))


def snowflake_invariance(bound: StrongModulusBound, theta) -> dict:
    """Transport a strong density to (X, d**theta) and re-verify it there.

    Weights are carried unchanged, so energies agree exactly.  Witnesses found
    in the snowflaked space are pulled back and audited against the original
    tau, which is the direction the invariance argument guarantees.
    """
    theta = as_fraction(theta)
    if not (0 < theta <= 1):
        raise ValueError("theta must lie in (0, 1]")
    c = bound.collection
    fam = bound.family
    if fam is None:
        raise ValueError("bound does not carry its curve family")
    tau2 = snowflake_tau(bound.tau, theta)
    if theta == 1:
        moved = c
    else:
        moved = c.with_balls([snowflake(b, theta) for b in c.balls], label=f"{c.label}|snowflake")
    rho = bound.density
    ver = verify_strong_admissibility(rho, moved, fam, StrongParams(tau2, bound.p))
    back = StrongVerification(ver.verdicts, bound.tau, bound.p)
    problems = recheck_witnesses(rho, c, fam, back, bound.tau)
    e0 = bound.density.energy(bound.p)
    e1 = Density(rho.weights.copy()).energy(bound.p)
    return {
        "theta": str(theta), "tau": float(bound.tau), "tau_prime": tau2,
        "verified": ver.admissible, "pullback_ok": not problems and ver.admissible,
        "energy": e0, "transported_energy": e1, "energy_equal": e0 == e1,
        "counterexample_candidates": [v.curve for v in ver.failures],
        "inconclusive": [v.curve for v in ver.failures if not v.conclusive],
    }

