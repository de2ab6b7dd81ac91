"""Exact planar/cubical geometry on [0,1]^n with Euclidean or sup norms.

Coordinates are ``fractions.Fraction`` so that ball/ball and ball/segment
incidence decisions are bit-stable. Distances for a snowflaked metric
``d**theta`` are returned as floats.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

Point = tuple  # tuple[Fraction, ...]

EUCLIDEAN = "euclidean"
SUP = "sup"
FLOAT_TOL = 1e-12


def as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ValueError("non-finite coordinate")
        return Fraction(repr(x))
    return Fraction(x)


def point(*coords) -> Point:
    if len(coords) == 1 and isinstance(coords[0], (tuple, list)):
        coords = tuple(coords[0])
    return tuple(as_fraction(c) for c in coords)


def as_point(p) -> Point:
    if isinstance(p, (int, float, Fraction)):
        return (as_fraction(p),)
    return tuple(as_fraction(c) for c in p)


def _iroot(n: int, k: int):
    """Exact integer k-th root of n, or None."""
    if n < 0:
        return None
    if n in (0, 1):
        return n
    r = int(round(n ** (1.0 / k)))
    for c in (r - 1, r, r + 1):
        if c >= 0 and c ** k == n:
            return c
    return None


def rational_power(x, theta):
    """x**theta, kept as a Fraction when the result is rational."""
    theta = as_fraction(theta)
    if isinstance(x, Fraction) or isinstance(x, int):
        x = Fraction(x)
        if theta == 1:
            return x
        if x == 0:
            return Fraction(0)
        a, b = theta.numerator, theta.denominator
        if a > 0 and x > 0:
            num = _iroot(x.numerator, b)
            den = _iroot(x.denominator, b)
            if num is not None and den is not None:
                return Fraction(num, den) ** a
        return float(x) ** float(theta)
    return float(x) ** float(theta)


@dataclass(frozen=True)
class MetricSpec:
    norm: str = EUCLIDEAN
    snowflake_theta: Fraction = Fraction(1)

    def __post_init__(self):
        if self.norm not in (EUCLIDEAN, SUP):
            raise ValueError(f"unknown norm {self.norm!r}")
        th = as_fraction(self.snowflake_theta)
        if not (0 < th <= 1):
            raise ValueError("snowflake exponent must lie in (0, 1]")
        object.__setattr__(self, "snowflake_theta", th)

    @property
    def theta(self) -> Fraction:
        return self.snowflake_theta

    def with_theta(self, theta) -> "MetricSpec":
        return MetricSpec(self.norm, as_fraction(theta))


BASE_METRIC = MetricSpec()


# -- exact norms ---------------------------------------------------------

def _sub(a, b):
    return tuple(x - y for x, y in zip(a, b))


def _check_dims(a, b):
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")


def norm_power(v, norm: str):
    """Exact 'comparison value' of a vector: squared norm (euclidean) or sup norm."""
    if norm == EUCLIDEAN:
        return sum(x * x for x in v)
    return max(abs(x) for x in v) if v else 0


def _cmp_value(s, norm: str):
    # value a radius-like quantity s must be compared against under norm_power
    return s * s if norm == EUCLIDEAN else s


def _norm_from_power(val, norm: str) -> float:
    return math.sqrt(val) if norm == EUCLIDEAN else float(val)


def base_distance_power(a: Point, b: Point, norm: str = EUCLIDEAN):
    _check_dims(a, b)
    return norm_power(_sub(a, b), norm)


def dist_lt(a: Point, b: Point, s, norm: str = EUCLIDEAN) -> bool:
    """Exact test ``|a-b| < s`` in the base metric."""
    if s <= 0:
        return False
    return base_distance_power(a, b, norm) < _cmp_value(s, norm)


def dist_le(a: Point, b: Point, s, norm: str = EUCLIDEAN) -> bool:
    if s < 0:
        return False
    return base_distance_power(a, b, norm) <= _cmp_value(s, norm)


def distance(a, b, m: MetricSpec = BASE_METRIC) -> float:
    """``|a-b|**theta`` under the chosen norm."""
    a, b = as_point(a), as_point(b)
    _check_dims(a, b)
    d = _norm_from_power(norm_power(_sub(a, b), m.norm), m.norm)
    return d if m.theta == 1 else d ** float(m.theta)


# -- balls ---------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    """Open ball ``B(center, radius)`` of the metric ``d**metric_exponent``."""

    center: Point
    radius: object
    metric_exponent: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        r = self.radius
        if not isinstance(r, float):
            r = as_fraction(r)
        if not r > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "radius", r)
        th = as_fraction(self.metric_exponent)
        if not (0 < th <= 1):
            raise ValueError("metric exponent must lie in (0, 1]")
        object.__setattr__(self, "metric_exponent", th)

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def base_radius(self):
        """Radius of the same point set measured in the base metric."""
        if self.metric_exponent == 1:
            return self.radius
        return rational_power(self.radius, 1 / self.metric_exponent)

    def inflate(self, c) -> "Ball":
        if not isinstance(c, float):
            c = as_fraction(c)
        return Ball(self.center, self.radius * c, self.metric_exponent)

    def diameter(self, norm: str = EUCLIDEAN):
        """Diameter of the ball as a subset of the ambient cube's metric."""
        d = 2 * self.base_radius
        if self.metric_exponent == 1:
            return d
        return rational_power(d, self.metric_exponent)

    def contains_point(self, x, norm: str = EUCLIDEAN) -> bool:
        return dist_lt(as_point(x), self.center, self.base_radius, norm)


def balls_intersect(a: Ball, b: Ball, norm: str = EUCLIDEAN) -> bool:
    """Point-set intersection of open balls (geodesic ambient space)."""
    return dist_lt(a.center, b.center, a.base_radius + b.base_radius, norm)


def balls_touch(a: Ball, b: Ball, norm: str = EUCLIDEAN) -> bool:
    """Closures intersect."""
    return dist_le(a.center, b.center, a.base_radius + b.base_radius, norm)


def ball_contains_ball(outer: Ball, inner: Ball, norm: str = EUCLIDEAN) -> bool:
    gap = outer.base_radius - inner.base_radius
    return dist_le(outer.center, inner.center, gap, norm)


def snowflake(b: Ball, theta) -> Ball:
    """Re-express a base-metric ball in the metric ``d**theta``."""
    theta = as_fraction(theta)
    if not (0 < theta <= 1):
        raise ValueError("theta must lie in (0, 1]")
    if b.metric_exponent != 1:
        raise ValueError("snowflake expects a ball of the base metric")
    return Ball(b.center, rational_power(b.radius, theta), theta)


# -- segments ------------------------------------------------------------

def _dot(u, v):
    return sum(x * y for x, y in zip(u, v))


def _lerp(p, q, t):
    return tuple(a + t * (b - a) for a, b in zip(p, q))


def _sup_line_candidates(a, d):
    """Breakpoints in [0,1] of t -> max_i |a_i - t d_i|."""
    ts = {Fraction(0), Fraction(1)}
    n = len(a)
    for i in range(n):
        if d[i] != 0:
            ts.add(a[i] / d[i])
        for j in range(i + 1, n):
            for sgn in (1, -1):
                den = d[i] - sgn * d[j]
                if den != 0:
                    ts.add((a[i] - sgn * a[j]) / den)
    return [t for t in ts if 0 <= t <= 1]


def point_segment_distance_power(c: Point, p: Point, q: Point, norm: str = EUCLIDEAN):
    """Exact squared-euclidean (or sup) distance from c to segment [p, q]."""
    d = _sub(q, p)
    a = _sub(c, p)
    if norm == EUCLIDEAN:
        dd = _dot(d, d)
        if dd == 0:
            return _dot(a, a)
        t = _dot(a, d) / dd
        t = min(max(t, Fraction(0)), Fraction(1))
        return norm_power(_sub(c, _lerp(p, q, t)), norm)
    best = None
    for t in _sup_line_candidates(a, d):
        v = max(abs(ai - t * di) for ai, di in zip(a, d))
        if best is None or v < best:
            best = v
    return best


def _segments_cross_2d(p1, q1, p2, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, q1, p2), orient(p1, q1, q2)
    o3, o4 = orient(p2, q2, p1), orient(p2, q2, q1)
    if ((o1 > 0) != (o2 > 0)) and o1 != 0 and o2 != 0 and ((o3 > 0) != (o4 > 0)) and o3 != 0 and o4 != 0:
        return True
    return ((o1 == 0 and on_seg(p1, q1, p2)) or (o2 == 0 and on_seg(p1, q1, q2))
            or (o3 == 0 and on_seg(p2, q2, p1)) or (o4 == 0 and on_seg(p2, q2, q1)))


def segment_distance_power(p1, q1, p2, q2, norm: str = EUCLIDEAN):
    """Exact distance power between segments [p1,q1] and [p2,q2]."""
    n = len(p1)
    edge = min(
        point_segment_distance_power(p1, p2, q2, norm),
        point_segment_distance_power(q1, p2, q2, norm),
        point_segment_distance_power(p2, p1, q1, norm),
        point_segment_distance_power(q2, p1, q1, norm),
    )
    if n == 2:
        if _segments_cross_2d(p1, q1, p2, q2):
            return Fraction(0)
        # a convex set missing the origin attains its min norm on the boundary
        return edge
    u, v, w0 = _sub(q1, p1), _sub(q2, p2), _sub(p1, p2)
    if norm == EUCLIDEAN:
        a, b, c = _dot(u, u), _dot(u, v), _dot(v, v)
        dd, e = _dot(u, w0), _dot(v, w0)
        den = a * c - b * b
        if den != 0:
            s = (b * e - c * dd) / den
            t = (a * e - b * dd) / den
            if 0 <= s <= 1 and 0 <= t <= 1:
                diff = tuple(w0[i] + s * u[i] - t * v[i] for i in range(n))
                return min(edge, norm_power(diff, norm))
        return edge
    # sup norm in 3D: piecewise-linear convex; check pairwise line intersections
    lines = []
    for i in range(n):
        lines.append((u[i], -v[i], w0[i]))
        for j in range(i + 1, n):
            for sgn in (1, -1):
                lines.append((u[i] - sgn * u[j], -v[i] + sgn * v[j], w0[i] - sgn * w0[j]))
    lines += [(Fraction(1), Fraction(0), Fraction(0)), (Fraction(1), Fraction(0), Fraction(-1)),
              (Fraction(0), Fraction(1), Fraction(0)), (Fraction(0), Fraction(1), Fraction(-1))]
    best = edge
    for (a1, b1, c1), (a2, b2, c2) in itertools.combinations(lines, 2):
        den = a1 * b2 - a2 * b1
        if den == 0:
            continue
        s = (-c1 * b2 + c2 * b1) / den
        t = (-a1 * c2 + a2 * c1) / den
        if 0 <= s <= 1 and 0 <= t <= 1:
            val = max(abs(w0[i] + s * u[i] - t * v[i]) for i in range(n))
            best = min(best, val)
    return best


@dataclass(frozen=True)
class PolyCurve:
    """Piecewise-linear curve through at least two vertices."""

    vertices: tuple

    def __post_init__(self):
        vs = tuple(as_point(v) for v in self.vertices)
        if len(vs) < 2:
            raise ValueError("a curve needs at least two vertices")
        dims = {len(v) for v in vs}
        if len(dims) != 1:
            raise ValueError("mixed vertex dimensions")
        for a, b in zip(vs, vs[1:]):
            if a == b:
                raise ValueError("consecutive curve vertices must be distinct")
        object.__setattr__(self, "vertices", vs)

    @property
    def dim(self) -> int:
        return len(self.vertices[0])

    def segments(self):
        return list(zip(self.vertices, self.vertices[1:]))

    def diameter_power(self, norm: str = EUCLIDEAN):
        vs = self.vertices
        return max(base_distance_power(a, b, norm) for a, b in itertools.combinations(vs, 2))

    def diameter(self, m: MetricSpec = BASE_METRIC) -> float:
        d = _norm_from_power(self.diameter_power(m.norm), m.norm)
        return d if m.theta == 1 else d ** float(m.theta)

    def diameter_at_least(self, s, norm: str = EUCLIDEAN) -> bool:
        """Exact test diam >= s in the base metric."""
        return self.diameter_power(norm) >= _cmp_value(as_fraction(s) if not isinstance(s, float) else s, norm)

    def length(self) -> float:
        return sum(math.sqrt(float(norm_power(_sub(b, a), EUCLIDEAN))) for a, b in self.segments())


def segment(a, b) -> PolyCurve:
    return PolyCurve((as_point(a), as_point(b)))


def curve_distance_power(e: PolyCurve, f: PolyCurve, norm: str = EUCLIDEAN):
    return min(segment_distance_power(p1, q1, p2, q2, norm)
               for p1, q1 in e.segments() for p2, q2 in f.segments())


def relative_distance(e: PolyCurve, f: PolyCurve, m: MetricSpec = BASE_METRIC) -> float:
    """dist(E, F) / min(diam E, diam F); zero for intersecting continua."""
    if e.dim != f.dim:
        raise ValueError("dimension mismatch")
    de, df = e.diameter_power(m.norm), f.diameter_power(m.norm)
    if de == 0 or df == 0:
        raise ValueError("degenerate continuum (zero diameter)")
    gap = curve_distance_power(e, f, m.norm)
    if gap == 0:
        return 0.0
    ratio = _norm_from_power(gap, m.norm) / _norm_from_power(min(de, df), m.norm)
    return ratio if m.theta == 1 else ratio ** float(m.theta)


def ball_meets_curve(b: Ball, c: PolyCurve, norm: str = EUCLIDEAN) -> bool:
    lim = _cmp_value(b.base_radius, norm)
    return any(point_segment_distance_power(b.center, p, q, norm) < lim for p, q in c.segments())


# -- coverings -----------------------------------------------------------

def _lex_points(A):
    return sorted({as_point(a) for a in A})


def covering_number(A: Iterable, r, m: MetricSpec = BASE_METRIC) -> int:
    """Size of a greedy maximal r-separated subset of A.

    This upper-bounds the covering number N(A, r) (open balls of radius r
    centred at the net cover A); the exact minimum is NP-hard in general and
    only available through :func:`covering_number_bruteforce`.
    """
    pts = _lex_points(A)
    if not pts:
        raise ValueError("empty point set")
    r = float(r) if isinstance(r, float) else as_fraction(r)
    if not r > 0:
        raise ValueError("radius must be positive")
    base_r = rational_power(r, 1 / m.theta) if m.theta != 1 else r
    net: list = []
    for a in pts:
        if not any(dist_lt(a, c, base_r, m.norm) for c in net):
            net.append(a)
    return len(net)


def covering_number_bruteforce(A: Iterable, r, m: MetricSpec = BASE_METRIC) -> int:
    """Exact minimum number of closed r-balls covering A (|A| <= 16).

    Candidate centres are the points of A and all pairwise midpoints; on a
    line this candidate set is complete. Solved by breadth-first search over
    covered-subset bitmasks.
    """
    pts = _lex_points(A)
    if not pts:
        raise ValueError("empty point set")
    if len(pts) > 16:
        raise ValueError("brute-force covering limited to 16 points")
    r = as_fraction(r)
    base_r = rational_power(r, 1 / m.theta) if m.theta != 1 else r
    cands = set(pts)
    for a, b in itertools.combinations(pts, 2):
        cands.add(tuple((x + y) / 2 for x, y in zip(a, b)))
    masks = set()
    for c in cands:
        mask = 0
        for i, a in enumerate(pts):
            if dist_le(a, c, base_r, m.norm):
                mask |= 1 << i
        masks.add(mask)
    masks = [mk for mk in masks if not any(mk != o and mk | o == o for o in masks)]
    full = (1 << len(pts)) - 1
    frontier, seen, depth = {0}, {0}, 0
    while full not in frontier:
        depth += 1
        nxt = set()
        for s in frontier:
            for mk in masks:
                t = s | mk
                if t not in seen:
                    seen.add(t)
                    nxt.add(t)
        frontier = nxt
    return depth


@dataclass(frozen=True)
class ContentEstimate:
    value: float
    exponent: float
    scale: float
    cover: tuple = field(default_factory=tuple)

    def recompute(self, norm: str = EUCLIDEAN) -> float:
        return sum(float(b.diameter(norm)) ** self.exponent for b in self.cover)


def hausdorff_content_upper(curves: Sequence[PolyCurve], s, delta, m: MetricSpec = BASE_METRIC) -> ContentEstimate:
    """Upper estimate of the Hausdorff s-content at scale delta.

    Every segment is split dyadically until each piece has diameter at most
    delta; each piece is covered by the ball centred at its midpoint whose
    diameter equals the piece length. A degenerate (one-point) curve gets a
    single ball of diameter delta.
    """
    curves = list(curves)
    if not curves:
        raise ValueError("empty curve set")
    s = float(s)
    if s <= 0:
        raise ValueError("exponent must be positive")
    dim = curves[0].dim
    dom = math.sqrt(dim) if m.norm == EUCLIDEAN else 1.0
    if m.theta != 1:
        dom = dom ** float(m.theta)
    dfl = float(delta)
    if not (0 < dfl <= dom / 2 + 1e-15):
        raise ValueError("delta must lie in (0, diam(domain)/2]")
    th = m.theta
    balls = []
    for c in curves:
        for p, q in c.segments():
            length = _norm_from_power(norm_power(_sub(q, p), m.norm), m.norm)
            j = 0
            while (length / 2 ** j) ** float(th) > dfl * (1 + 1e-12):
                j += 1
            pieces = 2 ** j
            for i in range(pieces):
                a = _lerp(p, q, Fraction(i, pieces))
                b = _lerp(p, q, Fraction(i + 1, pieces))
                mid = tuple((x + y) / 2 for x, y in zip(a, b))
                rad = _exact_norm(_sub(b, a), m.norm) / 2
                if th == 1:
                    balls.append(Ball(mid, rad))
                else:
                    balls.append(Ball(mid, rational_power(rad, th), th))
    if not balls:
        # only degenerate input: a single vanishing ball
        base = curves[0].vertices[0]
        rad = as_fraction(delta) / 2 if th == 1 else (dfl ** (1 / float(th))) / 2
        balls.append(Ball(base, rad) if th == 1 else Ball(base, rad ** float(th), th))
    value = sum(float(b.diameter(m.norm)) ** s for b in balls)
    return ContentEstimate(value=value, exponent=s, scale=dfl, cover=tuple(balls))


def _exact_norm(v, norm: str):
    """Norm of v, as a Fraction whenever it is rational."""
    val = norm_power(v, norm)
    if norm != EUCLIDEAN:
        return val
    val = Fraction(val)
    n, d = math.isqrt(val.numerator), math.isqrt(val.denominator)
    if n * n == val.numerator and d * d == val.denominator:
        return Fraction(n, d)
    return math.sqrt(val)


# -- quasisymmetry profiles ------------------------------------------------

@dataclass(frozen=True)
class QuasisymmetryProfile:
    """Power-type distortion gauge ``eta(t) = coefficient * t**exponent``."""

    coefficient: float = 1.0
    exponent: float = 1.0

    def __post_init__(self):
        if self.coefficient <= 0 or self.exponent <= 0:
            raise ValueError("power profile needs positive coefficient and exponent")

    def __call__(self, t: float) -> float:
        if t < 0:
            raise ValueError("profile defined on [0, inf)")
        return self.coefficient * t ** self.exponent

    def inverse(self, s: float) -> float:
        return (s / self.coefficient) ** (1.0 / self.exponent)

    def inverse_profile(self) -> "QuasisymmetryProfile":
        """Gauge of the inverse map: t -> 1 / eta^{-1}(1/t)."""
        return QuasisymmetryProfile(self.coefficient ** (1.0 / self.exponent), 1.0 / self.exponent)

    def relative_distance_bounds(self, delta: float) -> tuple:
        """Range of the image relative distance of continua at relative distance delta."""
        if delta <= 0:
            return (0.0, self(2 * delta))
        return (1.0 / (2 * self(1.0 / delta)), self(2 * delta))

    def ball_image_factor(self, L: float) -> float:
        """f(B(x, L r)) lies in B(f(x), factor * d(f x, f y)) when d(x, y) >= r/2."""
        return self(2 * L)

    def round_image_kappa(self, kappa: float) -> float:
        return 2 * self(kappa)


def snowflake_profile(theta) -> QuasisymmetryProfile:
    return QuasisymmetryProfile(1.0, float(theta))
