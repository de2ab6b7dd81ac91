"""Annulus certificates and the push-down rewriting of weighted ball collections.

An annulus certificate around B(x, r) is a collection of small balls inside
B(x, tau r), each meeting B(x, (tau-2) r), with a density that is strongly
tau-admissible for curves crossing from the closed ball B(x, r) to the
complement of B(x, (tau-2) r), and whose p-energy is small.

Certificates here are barrier rings: K concentric circles of radii strictly
between r and (tau-2) r, each covered by equal balls of radius s centred
(up to a small rational rounding) on the circle.  Every crossing curve meets
every ring, and balls from different rings have disjoint tau-inflations, so
one ball per ring is always a valid packing witness.  Ring weights are the
energy-optimal ones, w_j proportional to n_j ** (-1/(p-1)).  For p above the
dimension of the plane the energy decays like K ** (2-p); at or below it no
ring count helps, which is reported as ``CertificateUnavailable``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .fractals import CoverApproximation, IfsSystem, cover_from_balls, net_cover, resolve_ifs
from .geometry import EUCLIDEAN, Ball, PolyCurve, as_fraction, as_point, ball_meets_curve, dist_le, dist_lt
from .incidence import CurveFamilySpec, kl_problem, rational_directions, trace_curve
from .modulus import Density, ModulusResult, solve_modulus
from .strong import (SUM_SLACK, StrongAdmissibilityError, StrongParams, _greedy_packing,
                     inflations_disjoint, verify_strong_admissibility)

log = logging.getLogger(__name__)

CERT_BUDGET = 1_000_000
ENERGY_SLACK = 1e-9
WITNESS_DIRECTIONS = 16
SPACING = 1.8  # arc spacing of ring centres, in ball radii


class CertificateUnavailable(RuntimeError):
    """No certificate with energy below the target exists within the budget."""

    def __init__(self, message, energy=math.inf, x=None, r=None, p=None):
        super().__init__(message)
        self.energy = energy
        self.x = x
        self.r = r
        self.p = p


class HypothesisError(ValueError):
    """A replacement or equalizing hypothesis failed; ``clause`` names it."""

    def __init__(self, clause: str, detail: str = ""):
        super().__init__(f"{clause}: {detail}" if detail else clause)
        self.clause = clause


# -- attractor filtering ----------------------------------------------------------

def _full_cube(ifs: IfsSystem) -> bool:
    return ifs.n_kept == ifs.base ** ifs.dimension


def _kept_mask(ifs: IfsSystem, level: int, idx: np.ndarray) -> np.ndarray:
    """Vectorised attractor-tree membership of level cells given by integer indices."""
    b, dim = ifs.base, ifs.dimension
    top = b ** level
    ok = ((idx >= 0) & (idx < top)).all(axis=1)
    idx = np.clip(idx, 0, top - 1)
    table = np.zeros(b ** dim, dtype=bool)
    weights = b ** np.arange(dim)
    for v in ifs.kept_cells:
        table[int(np.dot(v, weights))] = True
    for t in range(level):
        dig = (idx // b ** (level - 1 - t)) % b
        ok &= table[dig @ weights]
    return ok


def _filter_level(ifs: IfsSystem, s: float) -> int:
    m = 1
    while ifs.base ** -m > s:
        m += 1
    return m


def _meets_attractor_cells(ifs: IfsSystem, centres: np.ndarray, s: float) -> np.ndarray:
    """Conservative test: ball B(c, s) meets some closed kept cell (and so may meet X)."""
    if _full_cube(ifs):
        gap = np.maximum(0.0, np.maximum(-centres, centres - 1.0))
        return np.sqrt((gap * gap).sum(axis=1)) < s * (1 + 1e-9)
    m = _filter_level(ifs, s)
    side = float(ifs.base) ** -m
    lo = np.floor((centres - s) / side).astype(np.int64)
    span = int(math.ceil(2 * s / side)) + 1
    keep = np.zeros(len(centres), dtype=bool)
    for off in np.ndindex(*([span + 1] * ifs.dimension)):
        idx = lo + np.array(off)
        box_lo = idx * side
        gap = np.maximum(0.0, np.maximum(box_lo - centres, centres - (box_lo + side)))
        near = np.sqrt((gap * gap).sum(axis=1)) < s * (1 + 1e-9)
        cand = near & ~keep
        if cand.any():
            keep[cand] |= _kept_mask(ifs, m, idx[cand])
    return keep


# -- ring designs ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RingDesign:
    """Numerical layout of a barrier-ring certificate (no Ball objects yet)."""

    x: tuple
    r: Fraction
    tau: Fraction
    p: float
    rings: int
    radius: Fraction
    grid: int
    ring_radii: tuple
    numerators: tuple      # per ring, integer centre numerators over ``grid``
    weights: np.ndarray    # per ring
    energy: float

    @property
    def counts(self) -> list:
        return [len(a) for a in self.numerators]

    @property
    def size(self) -> int:
        return sum(self.counts)

    @property
    def delta(self) -> Fraction:
        return self.radius / self.r


def _ring_weights(counts, p):
    n = np.asarray(counts, dtype=float)
    if (n == 0).any():
        # a ring missing the space entirely: no curve in X crosses the annulus
        return np.zeros(len(n)), 0.0
    if p <= 1 + 1e-12:
        w = np.zeros(len(n))
        w[int(np.argmin(n))] = 1.0
    else:
        w = n ** (-1.0 / (p - 1))
        w /= w.sum()
    return w, float(np.sum(n * w ** p))


def ring_design(ifs: IfsSystem, x, r, tau, p: float, rings: int) -> RingDesign:
    """Lay out ``rings`` barrier circles around x between radii r and (tau-2) r."""
    if ifs.dimension != 2:
        raise CertificateUnavailable("barrier rings need a planar attractor", x=x, r=r, p=p)
    x = as_point(x)
    r, tau = as_fraction(r), as_fraction(tau)
    K = int(rings)
    room = (tau - 3) * r
    s = room / (2 * tau * K + 3)
    # rounding error sqrt(2)/(2Q) stays below s/(20K): rings stay separated and covered
    Q = 1
    while math.sqrt(2) / (2 * Q) * 20 * K >= float(s):
        Q *= 2
    xf = np.array([float(c) for c in x])
    sf = float(s)
    radii, nums = [], []
    for j in range(K):
        R = r + (2 * j + 1) * room / (2 * K)
        Rf = float(R)
        n = max(3, int(math.ceil(2 * math.pi * Rf / (SPACING * sf))))
        ang = 2 * math.pi * np.arange(n) / n
        pts = xf[None, :] + Rf * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        num = np.rint(pts * Q).astype(np.int64)
        keep = _meets_attractor_cells(ifs, num / Q, sf)
        radii.append(R)
        nums.append(num[keep])
    w, energy = _ring_weights([len(a) for a in nums], p)
    return RingDesign(x, r, tau, float(p), K, s, Q, tuple(radii), tuple(nums), w, energy)


def check_ring_geometry(d: RingDesign) -> list:
    """Float audit of the barrier layout; returns the failing clauses.

    Checks that consecutive centres cover every circle (before attractor
    filtering) and that centres of distinct rings are more than 2 tau s apart.
    """
    problems = []
    xf = np.array([float(c) for c in d.x])
    s, tau = float(d.radius), float(d.tau)
    lo_prev = None
    for j, (R, num) in enumerate(zip(d.ring_radii, d.numerators)):
        Rf = float(R)
        n = max(3, int(math.ceil(2 * math.pi * Rf / (SPACING * s))))
        ang = 2 * math.pi * np.arange(n) / n
        pts = xf[None, :] + Rf * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        full = np.rint(pts * d.grid) / d.grid
        dev = np.abs(np.sqrt(((full - xf) ** 2).sum(axis=1)) - Rf).max()
        reach = 2 * Rf * math.sin(math.pi / (2 * n)) + dev
        if reach >= s * (1 - 1e-9):
            problems.append(f"ring {j} does not cover its circle")
        if len(num):
            dist = np.sqrt(((num / d.grid - xf) ** 2).sum(axis=1))
            lo, hi = dist.min(), dist.max()
            if lo_prev is not None and lo - lo_prev[1] <= 2 * tau * s * (1 + 1e-9):
                problems.append(f"rings {lo_prev[0]} and {j} too close")
            lo_prev = (j, hi)
        if Rf + dev >= float((d.tau - 2) * d.r) or Rf - dev <= float(d.r):
            problems.append(f"ring {j} leaves the annulus")
    return problems


def search_rings(ifs: IfsSystem, x, r, tau, p: float, eps_target: float, budget: int = CERT_BUDGET) -> RingDesign:
    """Smallest ring count whose energy is at most ``eps_target``.

    Doubles K until the target is met (then bisects), the ball budget is hit,
    or the energy stops improving over three doublings.
    """
    best = None
    stall = 0
    K, lo_bad = 1, 0
    found = None
    while True:
        d = ring_design(ifs, x, r, tau, p, K)
        if d.size > budget:
            break
        if best is None or d.energy < best.energy * (1 - 1e-6):
            best, stall = d, 0
        else:
            stall += 1
        if d.energy <= eps_target:
            found = d
            break
        if stall >= 3:
            break
        lo_bad = K
        K *= 2
    if found is None:
        e = best.energy if best is not None else math.inf
        raise CertificateUnavailable(
            f"no barrier certificate with energy <= {eps_target} at x={tuple(map(str, as_point(x)))}, "
            f"r={r}, p={p} (best measured energy {e:.6g})", energy=e, x=x, r=r, p=p)
    hi = found.rings
    while hi - lo_bad > 1:
        mid = (hi + lo_bad) // 2
        d = ring_design(ifs, x, r, tau, p, mid)
        if d.energy <= eps_target:
            hi, found = mid, d
        else:
            lo_bad = mid
    return found


# -- witness curves ------------------------------------------------------------------

def _segment_in_cells(ifs: IfsSystem, level: int, a, b) -> bool:
    """Exact test that an axis-parallel segment lies in the union of closed kept cells."""
    scale = ifs.base ** level
    a = [Fraction(c) * scale for c in a]
    b = [Fraction(c) * scale for c in b]
    axis = [i for i in range(len(a)) if a[i] != b[i]]
    if len(axis) != 1:
        raise ValueError("segment must be axis-parallel")
    k = axis[0]
    lo, hi = min(a[k], b[k]), max(a[k], b[k])
    cuts = [lo] + [Fraction(t) for t in range(math.floor(lo) + 1, math.ceil(hi))] + [hi]
    fixed = []
    for i in range(len(a)):
        if i == k:
            continue
        c = a[i]
        fixed.append((i, [int(c) - 1, int(c)] if c.denominator == 1 else [math.floor(c)]))
    for u, v in zip(cuts, cuts[1:]):
        mid = (u + v) / 2
        options = [[math.floor(mid)]]
        for i, vals in fixed:
            options = [o + [val] for o in options for val in vals]
        rows = []
        for o in options:
            row = [0] * len(a)
            row[k] = o[0]
            for (i, _), val in zip(fixed, o[1:]):
                row[i] = val
            rows.append(row)
        if not _kept_mask(ifs, level, np.array(rows, dtype=np.int64)).any():
            return False
    return True


def annulus_witnesses(ifs: IfsSystem, x, r, outer, filter_level: int | None = None,
                      count: int = WITNESS_DIRECTIONS) -> CurveFamilySpec:
    """Radial crossing segments from |y-x| = r to |y-x| = outer that stay in the space.

    On a full cube any segment inside the unit cube qualifies; otherwise only
    axis-parallel segments lying in the closed kept cells at ``filter_level``
    are used, so their traces meet the attractor-filtered rings.
    """
    x = as_point(x)
    r, outer = as_fraction(r), as_fraction(outer)
    curves = []
    if _full_cube(ifs):
        dirs = rational_directions(count)
    else:
        dirs = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    for u in dirs:
        a = tuple(xi + r * ui for xi, ui in zip(x, u))
        b = tuple(xi + outer * ui for xi, ui in zip(x, u))
        if not all(0 <= c <= 1 for c in a + b):
            continue
        if not _full_cube(ifs):
            if filter_level is None or not _segment_in_cells(ifs, filter_level, a, b):
                continue
        curves.append(PolyCurve((a, b)))
    return CurveFamilySpec(tuple(curves), outer - r, f"annulus-radial:{len(curves)}")


# -- certificates --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AnnulusCertificate:
    x: tuple
    r: Fraction
    tau: Fraction
    p: float
    collection: tuple
    density: Density
    energy: float
    delta_minus: Fraction
    delta_plus: Fraction
    eps: float
    rings: int = 0
    family: CurveFamilySpec | None = None
    verified: bool = False
    ring_of: tuple = ()

    @property
    def parent(self) -> Ball:
        return Ball(self.x, self.r)

    @property
    def cover(self) -> CoverApproximation:
        c = self.__dict__.get("_cover")
        if c is None:
            c = cover_from_balls(self.collection, label=f"cert:{self.x}:{self.r}")
            self.__dict__["_cover"] = c
        return c

    def check_invariants(self) -> list:
        """Exact containment, meeting and radius-window clauses; returns failures."""
        bad = []
        tau, r = self.tau, self.r
        if not (0 < self.delta_minus <= self.delta_plus < 1 / tau):
            bad.append("radius window fractions out of order")
        if self.energy > self.eps * (1 + ENERGY_SLACK):
            bad.append(f"energy {self.energy} exceeds declared {self.eps}")
        for i, b in enumerate(self.collection):
            if not (self.delta_minus * r <= b.radius <= self.delta_plus * r):
                bad.append(f"ball {i} radius outside the window")
                break
            if not dist_lt(b.center, self.x, (tau - 2) * r + b.radius):
                bad.append(f"ball {i} misses B(x,(tau-2)r)")
                break
            if not dist_le(b.center, self.x, tau * r - b.radius):
                bad.append(f"ball {i} not inside B(x,tau r)")
                break
        return bad

    def with_extra(self, ball: Ball, weight: float) -> "AnnulusCertificate":
        """Certificate with one more ball; adding positive weight keeps every witness valid."""
        coll = self.collection + (ball,)
        dens = Density(np.append(self.density.weights, float(weight)))
        e = dens.energy(self.p)
        return AnnulusCertificate(self.x, self.r, self.tau, self.p, coll, dens, e, self.delta_minus,
                                  self.delta_plus, max(self.eps, e), self.rings, self.family, self.verified,
                                  self.ring_of + (-1,))

    def summary(self) -> dict:
        return {
            "x": [str(c) for c in self.x], "r": str(self.r), "tau": str(self.tau), "p": self.p,
            "balls": len(self.collection), "rings": self.rings, "energy": self.energy, "eps": self.eps,
            "delta_minus": str(self.delta_minus), "delta_plus": str(self.delta_plus),
            "verified": self.verified, "witness_curves": len(self.family) if self.family else 0,
        }


def _declared_plus(delta: Fraction, tau: Fraction) -> Fraction:
    return (delta + 1 / tau) / 2


def certificate_from_design(ifs: IfsSystem, d: RingDesign, eps: float, verify: bool = True) -> AnnulusCertificate:
    Q = d.grid
    balls, weights, ring_of = [], [], []
    for j, num in enumerate(d.numerators):
        for row in num.tolist():
            balls.append(Ball(tuple(Fraction(int(v), Q) for v in row), d.radius))
            weights.append(d.weights[j])
            ring_of.append(j)
    dens = Density(np.array(weights, dtype=float))
    outer = (d.tau - 2) * d.r
    fam = annulus_witnesses(ifs, d.x, d.r, outer, _filter_level(ifs, float(d.radius)))
    cert = AnnulusCertificate(d.x, d.r, d.tau, d.p, tuple(balls), dens, d.energy, d.delta,
                              _declared_plus(d.delta, d.tau), float(eps), d.rings, fam, False, tuple(ring_of))
    if not verify:
        return cert
    problems = check_ring_geometry(d) + cert.check_invariants()
    if problems:
        raise StrongAdmissibilityError("certificate layout failed: " + "; ".join(problems))
    if len(fam) and len(balls):
        ver = verify_strong_admissibility(dens, cert.cover, fam, StrongParams(d.tau, d.p))
        if not ver.admissible:
            raise StrongAdmissibilityError("certificate density failed strong verification", ver.verdicts)
    object.__setattr__(cert, "verified", True)
    return cert


def make_certificate(ifs, x, r, tau=4, p: float = 3.0, eps_target: float = 0.5, budget: int = CERT_BUDGET,
                     rings: int | None = None) -> AnnulusCertificate:
    """Barrier-ring certificate for the annulus around B(x, r).

    With ``rings`` given the layout is fixed (so that a family of certificates
    shares one radius window); otherwise the smallest ring count meeting
    ``eps_target`` is searched for.  Raises ``CertificateUnavailable`` with the
    measured energy when the target cannot be met within ``budget`` balls.
    """
    ifs = resolve_ifs(ifs)
    tau, r = as_fraction(tau), as_fraction(r)
    if tau < 4:
        raise ValueError("tau must be at least 4")
    if not (0 < r < 1 / (2 * tau)):
        raise ValueError(f"radius {r} outside (0, 1/(2 tau))")
    if rings is None:
        d = search_rings(ifs, x, r, tau, p, eps_target, budget)
    else:
        d = ring_design(ifs, x, r, tau, p, rings)
        if d.size > budget:
            raise CertificateUnavailable(f"{d.size} balls exceed the budget {budget}", d.energy, x, r, p)
        if d.energy > eps_target:
            raise CertificateUnavailable(
                f"energy {d.energy:.6g} above {eps_target} with {rings} rings at x={x}, r={r}",
                d.energy, x, r, p)
    return certificate_from_design(ifs, d, eps_target)


def certificate_key(ifs: IfsSystem, x, r, tau, p, rings=None) -> str:
    pts = ",".join(str(c) for c in as_point(x))
    return f"{ifs.content_hash}|{pts}|{as_fraction(r)}|{as_fraction(tau)}|{float(p)!r}|{rings}"


class CertificateFactory:
    """Certificates with one shared ring count, cached by annulus.

    ``store`` is an optional object with ``get(key)``/``put(key, dict)`` used
    to persist certificate summaries between runs.
    """

    def __init__(self, ifs, tau=4, p: float = 3.0, eps: float = 0.5, rings: int | None = None,
                 budget: int = CERT_BUDGET, store=None):
        self.ifs = resolve_ifs(ifs)
        self.tau = as_fraction(tau)
        self.p = float(p)
        self.eps = float(eps)
        self.rings = rings
        self.budget = budget
        self.store = store
        self._cache = {}
        self.requests = 0

    def calibrate(self, balls, lookahead: int = 16) -> int:
        """Ring count good enough for every sampled annulus.

        Samples the given balls and, one level down, up to ``lookahead`` balls
        of each of their certificates, since later rounds are centred there.
        """
        need = self.rings or 1
        for b in balls:
            d = search_rings(self.ifs, b.center, b.radius, self.tau, self.p, self.eps, self.budget)
            need = max(need, d.rings)
        for _ in range(4):
            before = need
            for b in balls:
                d = ring_design(self.ifs, b.center, b.radius, self.tau, self.p, need)
                rows = np.concatenate([a for a in d.numerators if len(a)] or [np.zeros((0, 2), np.int64)])
                if not len(rows):
                    continue
                pick = rows[np.linspace(0, len(rows) - 1, min(lookahead, len(rows))).astype(int)]
                for row in pick.tolist():
                    c = tuple(Fraction(int(v), d.grid) for v in row)
                    dd = search_rings(self.ifs, c, d.radius, self.tau, self.p, self.eps, self.budget)
                    need = max(need, dd.rings)
            if need == before:
                break
        self.rings = need
        return need

    @property
    def delta(self) -> Fraction:
        if self.rings is None:
            raise RuntimeError("factory not calibrated")
        return (self.tau - 3) / (2 * self.tau * self.rings + 3)

    @property
    def delta_plus(self) -> Fraction:
        return _declared_plus(self.delta, self.tau)

    def __call__(self, ball: Ball) -> AnnulusCertificate:
        if self.rings is None:
            self.calibrate([ball])
        key = certificate_key(self.ifs, ball.center, ball.radius, self.tau, self.p, self.rings)
        self.requests += 1
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        cert = make_certificate(self.ifs, ball.center, ball.radius, self.tau, self.p, self.eps,
                                self.budget, rings=self.rings)
        self._cache[key] = cert
        if self.store is not None:
            self.store.put(key, cert.summary())
        return cert


# -- weighted collections and replacement --------------------------------------------------

@dataclass(eq=False)
class WeightedCollection:
    balls: tuple
    rho: np.ndarray
    family: CurveFamilySpec
    tau: Fraction = Fraction(4)
    p: float = 3.0
    witnesses: tuple | None = None
    norm: str = EUCLIDEAN

    def __post_init__(self):
        self.balls = tuple(self.balls)
        self.rho = np.asarray(self.rho, dtype=float)
        self.tau = as_fraction(self.tau)
        if len(self.rho) != len(self.balls):
            raise ValueError("one weight per ball required")

    @property
    def energy(self) -> float:
        return float(np.sum(self.rho ** self.p))

    @property
    def max_radius(self):
        return max(b.radius for b in self.balls)

    @property
    def min_radius(self):
        return min(b.radius for b in self.balls)

    @property
    def cover(self) -> CoverApproximation:
        c = getattr(self, "_cover", None)
        if c is None:
            c = cover_from_balls(self.balls, label="weighted")
            self._cover = c
        return c

    def density(self) -> Density:
        return Density(self.rho)

    def find_witnesses(self) -> tuple:
        """Packing witness per curve (generic search); raises when some curve fails."""
        ver = verify_strong_admissibility(self.density(), self.cover, self.family, StrongParams(self.tau, self.p))
        if not ver.admissible:
            raise StrongAdmissibilityError("collection is not strongly admissible on its family", ver.verdicts)
        self.witnesses = tuple(v.witness for v in ver.verdicts)
        return self.witnesses

    def audit(self) -> list:
        """Exact re-check of the stored witnesses: meeting, disjoint inflations, sum >= 1."""
        if self.witnesses is None:
            self.find_witnesses()
        problems = []
        for ci, (g, wit) in enumerate(zip(self.family.curves, self.witnesses)):
            total = float(sum(self.rho[i] for i in wit))
            if total < 1 - SUM_SLACK:
                problems.append(f"curve {ci}: witness sum {total}")
            for i in wit:
                if not ball_meets_curve(self.balls[i], g, self.norm):
                    problems.append(f"curve {ci}: ball {i} misses the curve")
            problems.extend(f"curve {ci}: balls {a},{b} inflations meet"
                            for a, b in _conflicting_pairs([self.balls[i] for i in wit], wit, self.tau))
        return problems

    def summary(self) -> dict:
        return {"balls": len(self.balls), "energy": self.energy, "max_radius": str(self.max_radius),
                "min_radius": str(self.min_radius), "curves": len(self.family)}


def _conflicting_pairs(balls, labels, tau):
    """Pairs whose tau-inflations meet; float pre-filter, exact confirmation."""
    if len(balls) < 2:
        return []
    cen = np.array([[float(c) for c in b.center] for b in balls])
    rad = np.array([float(b.radius) for b in balls])
    t = float(tau)
    out = []
    for a in range(len(balls)):
        d = np.sqrt(((cen[a + 1:] - cen[a]) ** 2).sum(axis=1))
        near = np.nonzero(d < t * (rad[a + 1:] + rad[a]) * (1 + 1e-9))[0]
        for k in near:
            b = a + 1 + int(k)
            if not inflations_disjoint(balls[a], balls[b], tau):
                out.append((labels[a], labels[b]))
    return out


def _ball_key(b: Ball):
    return (b.center, b.radius, b.metric_exponent)


@dataclass
class ReplaceReport:
    energy_before: float
    energy_after: float
    bound: float
    replaced: int
    kept: int
    shared: int
    certificate_energy: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _lift_witness(gamma: PolyCurve, old_witness, w: WeightedCollection, in_c: dict, certs: dict,
                  index_of: dict, tau):
    """Witness for the rewritten collection built from the old one, parent by parent."""
    out = []
    for i in old_witness:
        if i not in in_c:
            out.append(index_of[_ball_key(w.balls[i])])
            continue
        cert = certs[i]
        tr = [k for k in trace_curve(gamma, cert.cover) if cert.density[k] > 0]
        if not tr:
            return None
        wts = [cert.density[k] for k in tr]
        total, chosen = _greedy_packing(cert.collection, tr, wts, tau, EUCLIDEAN)
        if total < 1 - SUM_SLACK:
            return None
        out.extend(index_of[_ball_key(cert.collection[tr[k]])] for k in chosen)
    return tuple(dict.fromkeys(out))


def replace(w: WeightedCollection, chosen, certificates, eta: float, check_input: bool = True):
    """One push-down step: every chosen ball is replaced by its certificate collection.

    ``chosen`` are indices into ``w.balls``; ``certificates`` maps each chosen
    index to an ``AnnulusCertificate`` (or is a callable ball -> certificate).
    New weights take the maximum over parents of rho(parent) * rho_parent(ball);
    unchosen balls keep their own weight.  Returns (collection, report).
    """
    tau, p = w.tau, w.p
    chosen = sorted(set(int(i) for i in chosen))
    if not (0 < eta < 1) and chosen:
        raise HypothesisError("energy factor", f"eta={eta} must lie in (0, 1)")
    certs = {}
    for i in chosen:
        certs[i] = certificates(w.balls[i]) if callable(certificates) else certificates[i]
    if chosen:
        maxrad = max(w.balls[i].radius for i in chosen)
        need = 2 * (tau - 2) * maxrad
        if w.family.min_diameter is None or w.family.min_diameter < need:
            raise HypothesisError("curve diameter", f"declared minimum {w.family.min_diameter} < {need}")
        if not w.family.check_min_diameter(w.norm):
            raise HypothesisError("curve diameter", "a curve is shorter than the declared minimum")
    for i in chosen:
        B, cert = w.balls[i], certs[i]
        if cert.x != B.center or cert.r != B.radius or cert.tau != tau:
            raise HypothesisError("certificate parent", f"certificate does not belong to ball {i}")
        if not cert.verified:
            raise HypothesisError("certificate admissibility", f"certificate of ball {i} is unverified")
        if cert.energy > eta * (1 + ENERGY_SLACK):
            raise HypothesisError("certificate energy", f"ball {i}: {cert.energy} > eta={eta}")
        for b in cert.collection:
            if b.radius > B.radius / tau:
                raise HypothesisError("child radius", f"ball {i} has a child of radius {b.radius} > rad/tau")
            if not dist_lt(b.center, B.center, (tau - 2) * B.radius + b.radius):
                raise HypothesisError("child meets (tau-2)B", f"ball {i} has a child missing B(x,(tau-2)r)")
    if check_input and w.witnesses is None:
        w.find_witnesses()

    in_c = {i: True for i in chosen}
    weight = {}
    order = []
    parents = {}

    def put(b, val):
        k = _ball_key(b)
        if k not in weight:
            weight[k] = val
            order.append(b)
            parents[k] = 1
        else:
            weight[k] = max(weight[k], val)
            parents[k] += 1

    for i, B in enumerate(w.balls):
        if i in in_c:
            cert = certs[i]
            for k, b in enumerate(cert.collection):
                put(b, float(w.rho[i]) * cert.density[k])
        else:
            put(B, float(w.rho[i]))
    rho = np.array([weight[_ball_key(b)] for b in order])
    index_of = {_ball_key(b): n for n, b in enumerate(order)}
    out = WeightedCollection(tuple(order), rho, w.family, tau, p, None, w.norm)

    kept_part = sum(float(w.rho[i]) ** p for i in range(len(w.balls)) if i not in in_c)
    bound = sum(eta * float(w.rho[i]) ** p for i in chosen) + kept_part
    tight = sum(float(w.rho[i]) ** p * certs[i].energy for i in chosen) + kept_part
    report = ReplaceReport(w.energy, out.energy, bound, len(chosen), len(w.balls) - len(chosen),
                           sum(1 for v in parents.values() if v > 1), tight)
    if out.energy > bound * (1 + ENERGY_SLACK) + 1e-300:
        raise AssertionError(f"replacement energy {out.energy} above the bound {bound}")

    if w.witnesses is not None:
        lifted = []
        for g, wit in zip(w.family.curves, w.witnesses):
            lw = _lift_witness(g, wit, w, in_c, certs, index_of, tau)
            if lw is None:
                lifted = None
                break
            lifted.append(lw)
        out.witnesses = tuple(lifted) if lifted is not None else None
    if out.witnesses is None:
        out.find_witnesses()
    problems = out.audit()
    if problems:
        raise StrongAdmissibilityError("replacement lost strong admissibility: " + "; ".join(problems[:5]))
    return out, report


# -- equalizing -------------------------------------------------------------------------

def rounds_needed(M: float, eps0: float, eps: float) -> int:
    """ceil(log2(max(M/eps0, 1)) / log2(1/eps)) + 1, with exact integer quotients kept exact."""
    if not (0 < eps < 1):
        raise ValueError("certificate energy must lie in (0, 1)")
    q = math.log2(max(M / eps0, 1.0)) / math.log2(1.0 / eps)
    n = round(q)
    if abs(q - n) <= 1e-12 * max(1.0, abs(q)):
        return int(n) + 1
    return int(math.ceil(q)) + 1


@dataclass(frozen=True)
class EqualizeParams:
    eps0: float
    M: float
    eps: float
    delta_minus: Fraction
    delta_plus: Fraction
    r: Fraction

    @property
    def N(self) -> int:
        return rounds_needed(self.M, self.eps0, self.eps)

    @property
    def kappa(self) -> Fraction:
        return 2 / as_fraction(self.delta_minus)

    @classmethod
    def for_collection(cls, w: WeightedCollection, eps0: float, M: float, factory: CertificateFactory,
                       r=None) -> "EqualizeParams":
        N = rounds_needed(M, eps0, factory.eps)
        if factory.rings is None:
            factory.calibrate(w.balls[:8], lookahead=16 if N > 1 else 0)
        dm = factory.delta
        rr = dm ** N * w.min_radius if r is None else as_fraction(r)
        return cls(float(eps0), float(M), factory.eps, dm, factory.delta_plus, rr)


@dataclass
class EqualizeResult:
    collection: WeightedCollection
    params: EqualizeParams
    weight_rounds: int
    size_rounds: int
    trace: list = field(default_factory=list)

    @property
    def energy(self) -> float:
        return self.collection.energy

    def window_ok(self) -> bool:
        lo, hi = self.params.r, self.params.kappa * self.params.r
        return all(lo <= b.radius <= hi for b in self.collection.balls)


def _record(kind, k, w):
    return {"round": kind, "index": k, "balls": len(w.balls), "max_radius": str(w.max_radius),
            "min_radius": str(w.min_radius), "energy": w.energy}


def equalize(w: WeightedCollection, params: EqualizeParams, factory, max_size_rounds: int = 64) -> EqualizeResult:
    """Weight-reduction rounds followed by size-reduction rounds.

    Output radii lie in [r, kappa r] and the energy is at most eps0.
    """
    tau = w.tau
    if not w.energy < params.M:
        raise HypothesisError("initial energy", f"{w.energy} is not below M={params.M}")
    if w.family.min_diameter is None or w.family.min_diameter < tau * w.max_radius:
        raise HypothesisError("curve diameter", "curves must have diameter >= tau * max radius")
    N = params.N
    if params.r > as_fraction(params.delta_minus) ** N * w.min_radius:
        raise HypothesisError("target radius", f"r={params.r} exceeds delta_-^N * min radius")
    eps = params.eps
    trace = [_record("input", 0, w)]
    for k in range(1, N + 1):
        w, _ = replace(w, range(len(w.balls)), factory, eps)
        trace.append(_record("weight", k, w))
    kr = params.kappa * params.r
    S = w.max_radius
    size_rounds = 0
    while S > kr:
        if size_rounds >= max_size_rounds:
            raise RuntimeError("size reduction did not terminate")
        big = [i for i, b in enumerate(w.balls) if b.radius > kr]
        w, _ = replace(w, big, factory, eps)
        size_rounds += 1
        S_new = w.max_radius
        if S_new > max(kr, as_fraction(params.delta_plus) * S):
            raise AssertionError(f"size decay violated: {S_new} > max(kappa r, delta_+ {S})")
        S = S_new
        trace.append(_record("size", size_rounds, w))
    res = EqualizeResult(w, params, N, size_rounds, trace)
    if not res.window_ok():
        raise AssertionError("output radii leave [r, kappa r]")
    if w.energy > params.eps0 + 1e-9:
        raise AssertionError(f"output energy {w.energy} above eps0={params.eps0}")
    return res


# -- the small-modulus pipeline ---------------------------------------------------------------

@dataclass
class PipelineResult:
    l: int | None
    bound: float
    route: str
    modulus: ModulusResult | None
    plan: dict
    trace: list
    seconds: float

    @property
    def verified(self) -> bool:
        return self.l is not None

    def to_dict(self) -> dict:
        return {"l": self.l, "bound": self.bound, "route": self.route, "plan": self.plan, "trace": self.trace,
                "modulus": None if self.modulus is None else self.modulus.to_dict()}


def _verified_upper(res: ModulusResult) -> float:
    """Energy of the returned density rescaled so that every chain weighs at least one."""
    if res.trivial:
        return 0.0
    m = res.min_path_weight
    if not m > 0 or math.isinf(res.value):
        return math.inf
    return res.value / min(1.0, m) ** res.p


def small_modulus_pipeline(ifs, z, k: int, p: float, eps: float, tau=4, eps_cert: float = 0.9,
                           budget: int = CERT_BUDGET, max_level: int = 7, rel_tol: float = 1e-3,
                           l_start: int = 1) -> PipelineResult:
    """Find a level offset l with Mod_p(chains from B(z, b^-k) past 2B at level k+l) <= eps.

    The push-down plan is always computed first: the seed collection, a
    barrier certificate probe (which fails for p too small), the bridge
    constant, the number of weight-reduction rounds and the resulting level
    offset guaranteed by the construction.  When the seed alone is enough the
    answer is l0.  Otherwise the materialised push-down is far beyond any
    budget, so the bound is certified directly: for l = l_start, ... the chain
    modulus is solved at level k+l and its admissible density (rescaled by its
    exact minimum chain weight) gives the verified upper bound.
    """
    t0 = time.perf_counter()
    ifs = resolve_ifs(ifs)
    b = ifs.base
    tau = as_fraction(tau)
    z = as_point(z)
    radius = Fraction(1, b ** k)
    l0 = math.ceil(math.log(float(tau), b) - 1e-12) + 4
    trace = []

    seed_level = k + l0
    seed_cover = net_cover(ifs, seed_level, budget=budget)
    reach = 2 * radius
    seed = [u for u in seed_cover.balls if dist_lt(u.center, z, reach + u.radius)]
    M = len(seed) + 1.0
    trace.append({"stage": "seed", "level": seed_level, "balls": len(seed)})

    probe_r = min(Fraction(1, 4) / tau, radius / tau)
    probe_x = tuple(Fraction(1, 2) for _ in z)
    probe = search_rings(ifs, probe_x, probe_r, tau, p, eps_cert, budget)
    dm = probe.delta
    kappa = 2 / dm
    D = (2 * math.ceil(kappa) + 3) ** ifs.dimension
    C = float(D) ** (p + 1)
    eps0 = eps / C
    N = rounds_needed(M, eps0, probe.energy if probe.energy > 0 else eps_cert)
    l_proof = l0 + N * math.ceil(math.log(float(1 / dm), b)) + 1
    plan = {"l0": l0, "seed_balls": len(seed), "M": M, "certificate_rings": probe.rings,
            "certificate_balls": probe.size, "certificate_energy": probe.energy, "delta_minus": str(dm),
            "kappa": str(kappa), "bridge_D": D, "bridge_C": C, "eps0": eps0, "N": N, "l_proof": l_proof,
            "uniformity": "certificate probed at one interior annulus; uniformity over X not certified"}
    trace.append({"stage": "certificate-probe", "rings": probe.rings, "balls": probe.size,
                  "energy": probe.energy})

    if C * len(seed) <= eps:
        return PipelineResult(l0, C * len(seed), "seed", None, plan, trace, time.perf_counter() - t0)

    ball = Ball(z, radius)
    for l in range(max(1, l_start), max_level - k + 1):
        c = net_cover(ifs, k + l, budget=budget)
        res = solve_modulus(kl_problem(c, ball, 2), p, rel_tol=rel_tol)
        ub = _verified_upper(res)
        trace.append({"stage": "direct", "l": l, "level": k + l, "upper": ub, "status": res.status,
                      "seconds": res.seconds})
        log.info("pipeline level %d: verified upper %.6g", k + l, ub)
        if ub <= eps:
            return PipelineResult(l, ub, "direct", res, plan, trace, time.perf_counter() - t0)
    return PipelineResult(None, math.inf, "exhausted", None, plan, trace, time.perf_counter() - t0)
