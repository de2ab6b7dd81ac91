"""Incidence graphs of covers, connection problems, curve traces and witness curves."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .fractals import CoverApproximation, descendant_offsets, exact_pairs_within
from .geometry import (
    EUCLIDEAN,
    Ball,
    PolyCurve,
    as_fraction,
    as_point,
    dist_le,
    dist_lt,
    point_segment_distance_power,
)

PROXY_DEPTH = 4
TRACE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class IncidenceGraph:
    """Overlap graph: vertices are cover indices, edges join intersecting balls."""

    n: int
    edges: np.ndarray

    @cached_property
    def adjacency(self) -> tuple:
        nb = [[] for _ in range(self.n)]
        for a, b in self.edges:
            nb[int(a)].append(int(b))
            nb[int(b)].append(int(a))
        return tuple(tuple(sorted(x)) for x in nb)

    @cached_property
    def csr(self):
        """Symmetric adjacency as (indptr, indices)."""
        if len(self.edges) == 0:
            return np.zeros(self.n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        a = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        b = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        order = np.lexsort((b, a))
        a, b = a[order], b[order]
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.add.at(indptr, a + 1, 1)
        return np.cumsum(indptr), b.astype(np.int64)

    @property
    def edge_count(self) -> int:
        return int(len(self.edges))

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adjacency[u]

    def is_connected(self) -> bool:
        if self.n == 0:
            return True
        seen = {0}
        stack = [0]
        adj = self.adjacency
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.n

    def degree_stats(self) -> dict:
        deg = np.diff(self.csr[0]) if self.n else np.zeros(0)
        return {"vertices": self.n, "edges": self.edge_count,
                "min_degree": int(deg.min()) if self.n else 0,
                "max_degree": int(deg.max()) if self.n else 0,
                "connected": self.is_connected()}


def build_incidence(c: CoverApproximation) -> IncidenceGraph:
    """Edges between cover elements whose open balls intersect (exact when rational)."""
    if not c.balls:
        raise ValueError("empty cover")
    cached = c.__dict__.get("_incidence")
    if cached is not None:
        return cached
    pairs = c.candidate_pairs(factor=1.0)
    if c.exact:
        mask = exact_pairs_within(c, pairs, 1, 1, strict=True)
    else:
        z, r = c.centers_f, c.radii_f
        d = np.linalg.norm(z[pairs[:, 0]] - z[pairs[:, 1]], axis=1) if len(pairs) else np.zeros(0)
        mask = d < (r[pairs[:, 0]] + r[pairs[:, 1]]) * (1 - TRACE_TOL) if len(pairs) else np.zeros(0, bool)
    g = IncidenceGraph(len(c.balls), pairs[mask].astype(np.int64).reshape(-1, 2))
    c.__dict__["_incidence"] = g
    return g


# -- attractor proxy -------------------------------------------------------

class AttractorProxy:
    """Centres of the depth-4 descendant cells of level-k attractor cells.

    Stands in for the attractor when deciding whether a ball meets X or
    X minus a ball. Points are integer arrays over the denominator ``den``
    and every membership test is exact.
    """

    def __init__(self, ifs, level: int, depth: int = PROXY_DEPTH):
        self.ifs = ifs
        self.level = level
        self.depth = depth
        self.fine = ifs.base ** depth
        self.den = 2 * ifs.base ** (level + depth)
        self.offsets = descendant_offsets(ifs, depth) * 2 + 1
        self._cache = {}

    def cell_points(self, corner) -> np.ndarray:
        key = tuple(int(x) for x in corner)
        pts = self._cache.get(key)
        if pts is None:
            pts = np.array(key, dtype=np.int64)[None, :] * (2 * self.fine) + self.offsets
            if len(self._cache) < 4096:
                self._cache[key] = pts
        return pts

    def points_near(self, center, radius) -> np.ndarray:
        """Proxy points of all attractor cells meeting the bounding box of a ball."""
        b, k = self.ifs.base, self.level
        n = b ** k
        ranges = []
        for zi in center:
            lo = max(math.floor((float(zi) - float(radius)) * n) - 1, 0)
            hi = min(math.floor((float(zi) + float(radius)) * n) + 1, n - 1)
            ranges.append(range(lo, hi + 1))
        chunks = [self.cell_points(cr) for cr in itertools.product(*ranges) if self.ifs.contains_cell(k, cr)]
        if not chunks:
            return np.zeros((0, self.ifs.dimension), dtype=np.int64)
        return np.concatenate(chunks)

    def to_point(self, row) -> tuple:
        return tuple(Fraction(int(v), self.den) for v in row)


def _exact_within(pts: np.ndarray, den: int, center, radius, norm: str, strict: bool) -> np.ndarray:
    """Mask of integer points (over den) with |p - center| (<|<=) radius, exact."""
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    radius = as_fraction(radius)
    M = den
    for x in center:
        M = M * x.denominator // math.gcd(M, x.denominator)
    M = M * radius.denominator // math.gcd(M, radius.denominator)
    scale = M // den
    zc = [int(x * M) for x in center]
    rr = int(radius * M)
    big = (M * 4) ** 2 * len(center) > 2 ** 62
    P = pts.astype(object) if big else pts.astype(np.int64)
    diff = P * scale - np.array(zc, dtype=object if big else np.int64)[None, :]
    if norm == EUCLIDEAN:
        lhs, rhs = (diff * diff).sum(axis=1), rr * rr
    else:
        lhs, rhs = np.abs(diff).max(axis=1), rr
    return np.asarray(lhs < rhs if strict else lhs <= rhs, dtype=bool)


def _proxy_for(c: CoverApproximation) -> AttractorProxy | None:
    if c.ifs is None or c.level is None:
        return None
    px = c.__dict__.get("_proxy")
    if px is None:
        px = AttractorProxy(c.ifs, c.level)
        c.__dict__["_proxy"] = px
    return px


def attractor_points_in_ball(c: CoverApproximation, ball: Ball):
    """(integer points, denominator) of the attractor proxy inside an open ball.

    Covers without an attached IFS fall back to the ball centres of the cover.
    """
    px = _proxy_for(c)
    r = ball.base_radius
    if px is None:
        den = 1
        for u in c.balls:
            for x in u.center:
                den = den * x.denominator // math.gcd(den, x.denominator)
        pts = np.array([[int(x * den) for x in u.center] for u in c.balls], dtype=object)
        return pts[_exact_within(pts, den, ball.center, r, c.norm, True)], den
    pts = px.points_near(ball.center, r)
    return pts[_exact_within(pts, px.den, ball.center, r, c.norm, True)], px.den


def _row_point(row, den) -> tuple:
    return tuple(Fraction(int(v), den) for v in row)


def _own_cell(c: CoverApproximation, u: Ball):
    """Level-k attractor cell centred at z_U, if its closed box lies inside U."""
    if c.ifs is None or c.level is None:
        return None
    n = c.ifs.base ** c.level
    corner = tuple(int(math.floor(x * n)) for x in u.center)
    if any(x * 2 * n != 2 * cr + 1 for x, cr in zip(u.center, corner)):
        return None
    if not c.ifs.contains_cell(c.level, corner):
        return None
    half = Fraction(1, 2 * n)
    far = tuple(x + half for x in u.center)
    if not dist_lt(far, u.center, u.base_radius, c.norm):
        return None
    return corner, half


def _box_far_near(z, corner_center, half, norm):
    """Exact (farthest, nearest) distance powers from z to a closed cube."""
    far, near = [], []
    for zi, ci in zip(z, corner_center):
        d = abs(zi - ci)
        far.append(d + half)
        near.append(max(d - half, Fraction(0)))
    if norm == EUCLIDEAN:
        return sum(x * x for x in far), sum(x * x for x in near)
    return max(far), max(near)


# -- connection problems ------------------------------------------------------

@dataclass(eq=False)
class ConnectionProblem:
    """Source/target sets for (U, B, L)-chains: U_1 meets B, U_n meets X minus LB."""

    graph: IncidenceGraph
    source: tuple
    target: tuple
    ball: Ball
    L: object
    cover: CoverApproximation
    trivial: bool = False
    reason: str = ""
    flags: tuple = ()

    @property
    def n_vertices(self) -> int:
        return self.graph.n

    def _pick(self, u: int, outside: bool):
        pts, den = attractor_points_in_ball(self.cover, self.cover.balls[u])
        B = self.ball
        if outside:
            mask = ~_exact_within(pts, den, B.center, B.base_radius * self.L, self.cover.norm, True)
        else:
            mask = _exact_within(pts, den, B.center, B.base_radius, self.cover.norm, False)
        sel = pts[mask]
        if len(sel) == 0:
            return None
        zf = np.array([float(x) for x in B.center]) * den
        d = ((sel.astype(float) - zf[None, :]) ** 2).sum(axis=1)
        return _row_point(sel[int(np.argmax(d) if outside else np.argmin(d))], den)

    def source_point(self, u: int):
        """A proxy point of X in U_u and in the closed ball B (closest to its centre)."""
        return self._pick(u, False)

    def target_point(self, u: int):
        """A proxy point of X in U_u outside the open ball LB (farthest from its centre)."""
        return self._pick(u, True)


def _meets_flags(c: CoverApproximation, B: Ball, L):
    """Per-ball (closure meets closed B, meets X minus LB), deciding cheap cases geometrically."""
    norm = c.norm
    R = B.base_radius
    LR = R * L
    n = len(c.balls)
    src = np.zeros(n, dtype=bool)
    tgt = np.zeros(n, dtype=bool)
    z, r = c.centers_f, c.radii_f
    bz = np.array([float(x) for x in B.center])
    diff = z - bz[None, :]
    d = np.sqrt((diff * diff).sum(axis=1)) if norm == EUCLIDEAN else np.abs(diff).max(axis=1)
    Rf, LRf = float(R), float(LR)
    tol = 1e-9
    # balls clearly apart from B, or clearly inside LB, are decided by floats
    maybe_src = np.nonzero(d < (r + Rf) * (1 + tol))[0]
    maybe_tgt = np.nonzero(d + r > LRf * (1 - tol))[0]
    for i in maybe_src:
        u = c.balls[i]
        src[i] = dist_le(u.center, B.center, u.base_radius + R, norm)
    for i in maybe_tgt:
        u = c.balls[i]
        if dist_le(u.center, B.center, LR - u.base_radius, norm):
            continue
        own = _own_cell(c, u)
        if own is not None:
            _, near = _box_far_near(B.center, u.center, own[1], norm)
            if near >= (LR * LR if norm == EUCLIDEAN else LR):
                tgt[i] = True
                continue
        pts, den = attractor_points_in_ball(c, u)
        tgt[i] = bool((~_exact_within(pts, den, B.center, LR, norm, True)).any())
    return src, tgt


def kl_problem(c: CoverApproximation, B: Ball, L) -> ConnectionProblem:
    """Keith-Laakso connection problem for the cover c, ball B and inflation L > 1."""
    L = as_fraction(L)
    if not L > 1:
        raise ValueError("L must exceed 1")
    if not c.exact:
        raise ValueError("connection problems need a rational base-metric cover")
    g = build_incidence(c)
    src, tgt = _meets_flags(c, B, L)
    source = tuple(int(i) for i in np.nonzero(src)[0])
    target = tuple(int(i) for i in np.nonzero(tgt)[0])
    trivial, reason = False, ""
    if not source:
        trivial, reason = True, "empty source: no cover element meets B"
    elif not target:
        trivial, reason = True, "empty target: LB contains the attractor"
    flags = ()
    if set(source) & set(target):
        flags = ("source-target overlap",)
    return ConnectionProblem(g, source, target, B, L, c, trivial, reason, flags)


# -- constraint sets ------------------------------------------------------------

PROVENANCES = ("kl-paths", "curve-traces", "explicit")


@dataclass(frozen=True)
class ConstraintSet:
    """Explicit constraint family: each subset P demands sum over P of rho >= 1."""

    n_vertices: int
    subsets: tuple
    provenance: str = "explicit"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        subs = []
        for P in self.subsets:
            P = tuple(sorted({int(u) for u in P}))
            if P and (P[0] < 0 or P[-1] >= self.n_vertices):
                raise ValueError("constraint references a vertex outside the cover")
            subs.append(P)
        object.__setattr__(self, "subsets", tuple(subs))

    def __len__(self) -> int:
        return len(self.subsets)

    @property
    def has_empty(self) -> bool:
        """An empty subset can never be satisfied, so the family is inadmissible."""
        return any(len(P) == 0 for P in self.subsets)

    def union(self, other: "ConstraintSet") -> "ConstraintSet":
        n = max(self.n_vertices, other.n_vertices)
        prov = self.provenance if self.provenance == other.provenance else "explicit"
        return ConstraintSet(n, self.subsets + other.subsets, prov)

    def minimal(self) -> "ConstraintSet":
        """Drop duplicates and supersets; the modulus is unchanged."""
        subs = sorted(set(self.subsets), key=lambda P: (len(P), P))
        keep = []
        for P in subs:
            sP = set(P)
            if not any(set(Q) <= sP for Q in keep):
                keep.append(P)
        return ConstraintSet(self.n_vertices, tuple(keep), self.provenance)


def traces_constraints(fam: CurveFamilySpec, c: CoverApproximation) -> ConstraintSet:
    """Bourdon-Kleiner constraints: one subset per curve, the balls it meets."""
    return ConstraintSet(len(c.balls), tuple(trace_curve(g, c) for g in fam.curves), "curve-traces")


def enumerate_chains(problem: ConnectionProblem, limit: int = 100000) -> ConstraintSet:
    """All simple source-to-target chains whose interior avoids the target and the source.

    Chains that revisit the source or reach the target early contain a shorter
    chain, so only these minimal ones matter for the modulus.
    """
    g = problem.graph
    src, tgt = set(problem.source), set(problem.target)
    out = []
    adj = g.adjacency

    def walk(path, seen):
        if len(out) > limit:
            raise RuntimeError("chain enumeration limit exceeded")
        u = path[-1]
        if u in tgt:
            out.append(tuple(path))
            return
        for v in adj[u]:
            if v in seen or v in src:
                continue
            seen.add(v)
            path.append(v)
            walk(path, seen)
            path.pop()
            seen.discard(v)

    if not problem.trivial:
        for s in sorted(src):
            walk([s], {s})
    return ConstraintSet(g.n, tuple(out), "kl-paths")


# -- shortest chains ---------------------------------------------------------

class VertexPathOracle:
    """Minimum vertex-weight source-to-target chains via a lifted edge graph.

    Vertex weights are moved onto the edges entering each vertex; a super
    source feeds every source vertex with that vertex's own weight.
    """

    def __init__(self, graph: IncidenceGraph, source: Sequence[int], target: Sequence[int]):
        n = graph.n
        indptr, indices = graph.csr
        src = np.asarray(source, dtype=np.int64)
        # super source is vertex n
        self.n = n
        self.heads = np.concatenate([indices, src])
        self.indptr = np.concatenate([indptr, [indptr[-1] + len(src)]])
        self.target = np.asarray(target, dtype=np.int64)
        self.shape = (n + 1, n + 1)

    def solve(self, weights: np.ndarray):
        data = np.asarray(weights, dtype=float)[self.heads]
        g = sp.csr_matrix((data, self.heads, self.indptr), shape=self.shape)
        dist, pred = dijkstra(g, directed=True, indices=self.n, return_predecessors=True)
        return dist, pred

    def path_to(self, pred, t: int) -> list:
        path = []
        v = int(t)
        while v != self.n and v >= 0:
            path.append(v)
            v = int(pred[v])
        return path[::-1]

    def shortest(self, weights: np.ndarray, k: int = 1, below=None):
        """Up to k distinct cheapest chains ending at distinct targets."""
        dist, pred = self.solve(weights)
        dt = dist[self.target]
        order = np.argsort(dt, kind="stable")
        out = []
        seen = set()
        for idx in order:
            w = dt[idx]
            if not np.isfinite(w):
                break
            if below is not None and w >= below and out:
                break
            path = tuple(self.path_to(pred, self.target[idx]))
            if path in seen:
                continue
            seen.add(path)
            out.append((float(w), path))
            if len(out) >= k:
                break
        return out


# -- traces and curves ---------------------------------------------------------

def trace_curve(gamma: PolyCurve, c: CoverApproximation) -> tuple:
    """Indices of cover balls meeting some segment of gamma."""
    if not c.balls:
        return ()
    z, r = c.centers_f, c.radii_f
    norm = c.norm
    hit = np.zeros(len(c.balls), dtype=bool)
    for p, q in gamma.segments():
        pf = np.array([float(x) for x in p])
        qf = np.array([float(x) for x in q])
        d = qf - pf
        a = z - pf[None, :]
        if norm == EUCLIDEAN:
            dd = float(d @ d)
            t = np.clip((a @ d) / dd, 0.0, 1.0) if dd > 0 else np.zeros(len(z))
            diff = a - t[:, None] * d[None, :]
            dist = np.sqrt((diff * diff).sum(axis=1))
        else:
            # sup norm: sample-free bound via exact fallback below
            dist = None
        if dist is None:
            cand = np.nonzero(~hit)[0]
            for i in cand:
                if point_segment_distance_power(c.balls[i].center, p, q, norm) < c.balls[i].base_radius:
                    hit[i] = True
            continue
        scale = np.maximum(1.0, r)
        sure = dist < r - 1e-9 * scale
        maybe = np.nonzero((~sure) & (dist < r + 1e-9 * scale) & ~hit)[0]
        hit |= sure
        for i in maybe:
            u = c.balls[i]
            if c.exact:
                if point_segment_distance_power(u.center, p, q, norm) < u.base_radius ** 2:
                    hit[i] = True
            elif dist[i] < r[i] - TRACE_TOL:
                hit[i] = True
    return tuple(int(i) for i in np.nonzero(hit)[0])


def lens_point(u: Ball, v: Ball):
    """Rational point of the open lens u cap v on the centre segment."""
    ru, rv = u.base_radius, v.base_radius
    t = ru / (ru + rv)
    return tuple(a + t * (b - a) for a, b in zip(u.center, v.center))


def overlap_witness(c: CoverApproximation, i: int, j: int):
    """Proxy point of X inside U_i cap U_j nearest the lens point, else the lens point."""
    u, v = c.balls[i], c.balls[j]
    lp = lens_point(u, v)
    if _proxy_for(c) is not None:
        pts, den = attractor_points_in_ball(c, u)
        sel = pts[_exact_within(pts, den, v.center, v.base_radius, c.norm, True)]
        if len(sel):
            lf = np.array([float(x) for x in lp]) * den
            d = ((sel.astype(float) - lf[None, :]) ** 2).sum(axis=1)
            return _row_point(sel[int(np.argmin(d))], den)
    return lp


def _dedupe(points):
    out = []
    for p in points:
        if not out or out[-1] != p:
            out.append(p)
    return out


def chain_to_curve(chain: Sequence[int], c: CoverApproximation, graph: IncidenceGraph | None = None,
                   start=None, end=None) -> PolyCurve:
    """Polyline through overlap witnesses of consecutive chain elements."""
    chain = [int(u) for u in chain]
    if not chain:
        raise ValueError("empty chain")
    g = graph or build_incidence(c)
    for a, b in zip(chain, chain[1:]):
        if not g.has_edge(a, b):
            raise ValueError(f"chain elements {a} and {b} are not adjacent")
    first, last = c.balls[chain[0]], c.balls[chain[-1]]
    pts = [start if start is not None else first.center]
    for a, b in zip(chain, chain[1:]):
        pts.append(overlap_witness(c, a, b))
    pts.append(end if end is not None else last.center)
    pts = _dedupe(pts)
    if len(pts) < 2:
        z = first.center
        off = first.base_radius / 2
        pts = [z, (z[0] + off,) + tuple(z[1:])]
    return PolyCurve(tuple(pts))


@dataclass(frozen=True)
class CurveFamilySpec:
    """Finite curve family with a declared minimum diameter."""

    curves: tuple = ()
    min_diameter: object = None
    descriptor: str = "explicit"

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))

    def __len__(self) -> int:
        return len(self.curves)

    def check_min_diameter(self, norm: str = EUCLIDEAN) -> bool:
        if self.min_diameter is None:
            return True
        return all(g.diameter_at_least(self.min_diameter, norm) for g in self.curves)

    def to_text(self) -> str:
        payload = {
            "format": "confmod-curves/1",
            "descriptor": self.descriptor,
            "min_diameter": None if self.min_diameter is None else str(self.min_diameter),
            "curves": [[[str(x) for x in v] for v in g.vertices] for g in self.curves],
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CurveFamilySpec":
        data = json.loads(text)
        if data.get("format") != "confmod-curves/1":
            raise ValueError("unknown curve family format")
        curves = tuple(PolyCurve(tuple(tuple(Fraction(x) for x in v) for v in g)) for g in data["curves"])
        md = data.get("min_diameter")
        return cls(curves, None if md is None else Fraction(md), data.get("descriptor", "explicit"))


def witness_family(c: CoverApproximation, problem: ConnectionProblem, count: int = 4,
                   penalty: float | None = None) -> CurveFamilySpec:
    """Shortest chains, penalising reuse of vertices, turned into curves B-bar -> X minus LB.

    The result is a finite subfamily of the curve family; its modulus can only
    under-estimate the modulus of the full family (monotonicity).
    """
    R = problem.ball.base_radius
    md = (problem.L - 1) * R
    if problem.trivial or count <= 0:
        return CurveFamilySpec((), md, "witness:empty")
    g = problem.graph
    oracle = VertexPathOracle(g, problem.source, problem.target)
    w = np.ones(g.n)
    pen = float(g.n) if penalty is None else penalty
    curves, chains = [], set()
    tries = 0
    while len(curves) < count and tries < 4 * count:
        tries += 1
        found = oracle.shortest(w, k=1)
        if not found:
            break
        _, chain = found[0]
        w[list(chain)] += pen
        if chain in chains:
            continue
        chains.add(chain)
        s = problem.source_point(chain[0])
        t = problem.target_point(chain[-1])
        if s is None or t is None:
            continue
        curves.append(chain_to_curve(chain, c, g, start=s, end=t))
    return CurveFamilySpec(tuple(curves), md, f"witness:{len(curves)}")


# -- explicit geometric families ----------------------------------------------

def rational_directions(count: int, dim: int = 2) -> list:
    """Exact rational unit vectors, spread over the circle (Pythagorean parametrisation)."""
    if dim != 2:
        raise ValueError("rational directions implemented for the plane")
    out = []
    for i in range(count):
        ang = 2 * math.pi * (i + 0.5) / count
        t = Fraction(math.tan(ang / 2)).limit_denominator(64)
        den = 1 + t * t
        out.append(((1 - t * t) / den, 2 * t / den))
    return out


def annulus_family(center, r, R, count: int = 8) -> CurveFamilySpec:
    """Radial segments from |y - x| = r to |y - x| = R (planar)."""
    x = as_point(center)
    r, R = as_fraction(r), as_fraction(R)
    curves = []
    for u in rational_directions(count):
        a = tuple(xi + r * ui for xi, ui in zip(x, u))
        b = tuple(xi + R * ui for xi, ui in zip(x, u))
        curves.append(PolyCurve((a, b)))
    return CurveFamilySpec(tuple(curves), R - r, f"annulus:{count}")


def clip_family_to_unit_cube(fam: CurveFamilySpec) -> CurveFamilySpec:
    """Drop curves leaving [0,1]^n."""
    keep = [g for g in fam.curves if all(0 <= x <= 1 for v in g.vertices for x in v)]
    return CurveFamilySpec(tuple(keep), fam.min_diameter, fam.descriptor + "|clipped")
