"""Iterated function systems on [0,1]^n, their cells, and ball covers built on them."""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    EUCLIDEAN,
    Ball,
    as_fraction,
    as_point,
    ball_contains_ball,
    balls_touch,
)

CELL_BUDGET = 10 ** 7
LB_LEVELS = (1, 2, 4, 8)
COVERAGE_DEPTH = 4


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class IfsSystem:
    """Self-similar system x -> (x + v) / base over the kept offsets v."""

    base: int
    kept_cells: tuple
    dimension: int
    name: str = ""

    def __post_init__(self):
        if self.base < 2:
            raise ValueError("subdivision base must be >= 2")
        if self.dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        kept = tuple(sorted({tuple(int(d) for d in v) for v in self.kept_cells}))
        if not kept:
            raise ValueError("kept_cells must be nonempty")
        for v in kept:
            if len(v) != self.dimension or any(not 0 <= d < self.base for d in v):
                raise ValueError(f"kept cell {v} outside {{0..{self.base - 1}}}^{self.dimension}")
        object.__setattr__(self, "kept_cells", kept)
        if not _face_connected(kept):
            raise ValueError("kept cells are not face-adjacent connected at level 1")

    @property
    def n_kept(self) -> int:
        return len(self.kept_cells)

    def similarity_dimension(self) -> float:
        """Moran exponent s with n_kept = base**s."""
        return math.log(self.n_kept) / math.log(self.base)

    def to_text(self) -> str:
        cells = " ".join("(" + ",".join(str(d) for d in v) + ")" for v in self.kept_cells)
        return (f"name = {self.name}\nbase = {self.base}\n"
                f"dimension = {self.dimension}\nkept_cells = {cells}\n")

    @cached_property
    def content_hash(self) -> str:
        canon = f"{self.base}|{self.dimension}|" + ";".join(",".join(map(str, v)) for v in self.kept_cells)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @cached_property
    def kept_array(self) -> np.ndarray:
        return np.array(self.kept_cells, dtype=np.int64)

    @cached_property
    def _kept_set(self) -> frozenset:
        return frozenset(self.kept_cells)

    def contains_cell(self, level: int, corner: Sequence[int]) -> bool:
        """Whether the level cell with this integer corner belongs to the attractor tree."""
        b = self.base
        corner = [int(c) for c in corner]
        if any(c < 0 or c >= b ** level for c in corner):
            return False
        for j in range(level - 1, -1, -1):
            digit = tuple((c // b ** j) % b for c in corner)
            if digit not in self._kept_set:
                return False
        return True


def _face_connected(kept) -> bool:
    kept = list(kept)
    seen = {kept[0]}
    stack = [kept[0]]
    ks = set(kept)
    while stack:
        v = stack.pop()
        for i in range(len(v)):
            for dlt in (-1, 1):
                w = v[:i] + (v[i] + dlt,) + v[i + 1:]
                if w in ks and w not in seen:
                    seen.add(w)
                    stack.append(w)
    return len(seen) == len(ks)


def parse_ifs(text: str) -> IfsSystem:
    """Parse the key-value IFS format (``key = value`` lines, ``#`` comments)."""
    fields = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed IFS line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        fields[key] = val
    missing = {"base", "dimension", "kept_cells"} - set(fields)
    if missing:
        raise ValueError(f"IFS description missing fields: {sorted(missing)}")
    cells = []
    for grp in fields["kept_cells"].replace(" ", "").split(")"):
        grp = grp.strip("(,; ")
        if grp:
            cells.append(tuple(int(x) for x in grp.split(",")))
    return IfsSystem(int(fields["base"]), tuple(cells), int(fields["dimension"]), fields.get("name", ""))


def load_ifs(path) -> IfsSystem:
    with open(path, encoding="utf-8") as fh:
        return parse_ifs(fh.read())


SQUARE = IfsSystem(2, ((0, 0), (0, 1), (1, 0), (1, 1)), 2, "square")
CARPET = IfsSystem(3, tuple((i, j) for i in range(3) for j in range(3) if (i, j) != (1, 1)), 2, "carpet")
SPONGE = IfsSystem(3, tuple(v for v in itertools.product(range(3), repeat=3) if sum(d == 1 for d in v) < 2), 3, "sponge")
SEGMENT = IfsSystem(2, ((0, 0), (1, 0)), 2, "segment")
BUILTIN = {s.name: s for s in (SQUARE, CARPET, SPONGE, SEGMENT)}


def resolve_ifs(source) -> IfsSystem:
    """Accept an IfsSystem, a builtin name, or a path to an IFS file."""
    if isinstance(source, IfsSystem):
        return source
    key = str(source)
    stem = key[:-4] if key.endswith(".ifs") else key
    import os
    if os.path.exists(key):
        return load_ifs(key)
    if os.path.basename(stem) in BUILTIN:
        return BUILTIN[os.path.basename(stem)]
    raise FileNotFoundError(f"unknown IFS {source!r}")


# -- cells ---------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    """Level-k cell: the box corner/b^k + [0, 1/b^k]^n."""

    level: int
    corner: tuple
    base: int

    @property
    def side(self) -> Fraction:
        return Fraction(1, self.base ** self.level)

    @property
    def index(self) -> tuple:
        """Base-b digit strings, one per coordinate (most significant first)."""
        b, k = self.base, self.level
        out = []
        for c in self.corner:
            digits = []
            for j in range(k - 1, -1, -1):
                digits.append(str((c // b ** j) % b))
            out.append("".join(digits))
        return tuple(out)

    @property
    def box(self) -> tuple:
        s = self.side
        return tuple((c * s, (c + 1) * s) for c in self.corner)

    @property
    def center(self) -> tuple:
        s = self.side
        return tuple((2 * c + 1) * s / 2 for c in self.corner)


def cell_count(ifs: IfsSystem, k: int) -> int:
    return ifs.n_kept ** k


def cell_corners(ifs: IfsSystem, k: int, budget: int = CELL_BUDGET) -> np.ndarray:
    """Integer corners (units of base**-k) of all level-k cells, lexicographic."""
    if k < 0:
        raise ValueError("level must be >= 0")
    if cell_count(ifs, k) > budget:
        raise BudgetExceeded(f"{ifs.n_kept}^{k} cells exceed budget {budget}")
    corners = np.zeros((1, ifs.dimension), dtype=np.int64)
    kept = ifs.kept_array
    for _ in range(k):
        corners = (ifs.base * corners[:, None, :] + kept[None, :, :]).reshape(-1, ifs.dimension)
    order = np.lexsort(corners.T[::-1])
    return corners[order]


def descendant_offsets(ifs: IfsSystem, depth: int) -> np.ndarray:
    """Corners of the depth-level descendants of the unit cell (units base**-depth)."""
    return cell_corners(ifs, depth)


def generate_cells(ifs: IfsSystem, k: int, budget: int = CELL_BUDGET) -> list:
    corners = cell_corners(ifs, k, budget)
    return [Cell(k, tuple(int(x) for x in c), ifs.base) for c in corners]


# -- covers --------------------------------------------------------------

def _lcm(a: int, b: int) -> int:
    return a * b // math.gcd(a, b)


@dataclass(frozen=True, eq=False)
class CoverApproximation:
    """Finite ball collection with roundness and local-boundedness metadata.

    Each stored element U is the open ball B(z_U, r_U) itself, so the
    roundness inclusion B(z_U, r_U/kappa) c U c B(z_U, r_U) holds whenever
    kappa >= 1.
    """

    balls: tuple
    kappa: object = Fraction(1)
    level_r: object = None
    locally_bounded_table: tuple = ()
    covers_space: bool = False
    ifs: IfsSystem | None = None
    level: int | None = None
    norm: str = EUCLIDEAN
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "balls", tuple(self.balls))
        tbl = self.locally_bounded_table
        if isinstance(tbl, dict):
            tbl = tuple(sorted(tbl.items()))
        object.__setattr__(self, "locally_bounded_table", tuple(tbl))

    def __len__(self) -> int:
        return len(self.balls)

    @property
    def lb_table(self) -> dict:
        return dict(self.locally_bounded_table)

    @property
    def empty(self) -> bool:
        return not self.balls

    @cached_property
    def exact(self) -> bool:
        return all(b.metric_exponent == 1 and isinstance(b.radius, Fraction) for b in self.balls)

    @cached_property
    def int_repr(self):
        """(D, centers, radii): all coordinates as integers over the common denominator D."""
        if not self.exact:
            raise ValueError("integer representation needs rational base-metric balls")
        den = 1
        for b in self.balls:
            for c in b.center:
                den = _lcm(den, c.denominator)
            den = _lcm(den, b.radius.denominator)
        dim = self.balls[0].dim if self.balls else 2
        big = den ** 2 * 16 * dim > 2 ** 62
        dtype = object if big else np.int64
        cen = np.array([[int(c * den) for c in b.center] for b in self.balls], dtype=dtype).reshape(-1, dim)
        rad = np.array([int(b.radius * den) for b in self.balls], dtype=dtype)
        return den, cen, rad

    @cached_property
    def centers_f(self) -> np.ndarray:
        dim = self.balls[0].dim if self.balls else 2
        return np.array([[float(c) for c in b.center] for b in self.balls], dtype=float).reshape(-1, dim)

    @cached_property
    def radii_f(self) -> np.ndarray:
        return np.array([float(b.base_radius) for b in self.balls], dtype=float)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.centers_f)

    def candidate_pairs(self, factor=1.0, extra=0.0) -> np.ndarray:
        """Superset of index pairs (i<j) with |z_i - z_j| < factor*(r_i + r_j) + extra."""
        if len(self.balls) < 2:
            return np.zeros((0, 2), dtype=np.int64)
        reach = 2 * float(self.radii_f.max()) * float(factor) + float(extra)
        p = 2 if self.norm == EUCLIDEAN else np.inf
        pairs = self.tree.query_pairs(reach * (1 + 1e-9) + 1e-15, p=p, output_type="ndarray")
        if len(pairs) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = np.sort(pairs, axis=1)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]

    def with_balls(self, balls, **changes) -> "CoverApproximation":
        kw = dict(kappa=self.kappa, level_r=self.level_r, locally_bounded_table=self.locally_bounded_table,
                  covers_space=self.covers_space, ifs=self.ifs, level=self.level, norm=self.norm, label=self.label)
        kw.update(changes)
        return CoverApproximation(tuple(balls), **kw)


def exact_dist_power(cen: np.ndarray, i, j, norm: str = EUCLIDEAN):
    """Exact integer distance power between rows (vectorised over index arrays)."""
    diff = cen[i] - cen[j]
    if norm == EUCLIDEAN:
        return (diff * diff).sum(axis=-1)
    return np.abs(diff).max(axis=-1)


def _cmp(s, norm):
    return s * s if norm == EUCLIDEAN else s


def exact_pairs_within(cover: CoverApproximation, pairs: np.ndarray, num: int, den: int, strict=True) -> np.ndarray:
    """Mask of pairs with |z_i - z_j| (<|<=) (num/den)*(r_i + r_j), exact."""
    if len(pairs) == 0:
        return np.zeros(0, dtype=bool)
    D, cen, rad = cover.int_repr
    i, j = pairs[:, 0], pairs[:, 1]
    lhs = exact_dist_power(cen, i, j, cover.norm)
    s = rad[i] + rad[j]
    if cover.norm == EUCLIDEAN:
        lhs = lhs * (den * den)
        rhs = s * s * (num * num)
    else:
        lhs = lhs * den
        rhs = s * num
    return lhs < rhs if strict else lhs <= rhs


def net_cover(ifs: IfsSystem, k: int, inflation=1, budget: int = CELL_BUDGET) -> CoverApproximation:
    """Balls of radius inflation * base**-k around every level-k cell centre."""
    lam = as_fraction(inflation)
    if lam < 1:
        raise ValueError("inflation must be >= 1")
    if k < 1:
        raise ValueError("net covers need level k >= 1")
    corners = cell_corners(ifs, k, budget)
    side = Fraction(1, ifs.base ** k)
    radius = lam * side
    balls = tuple(Ball(tuple(Fraction(2 * int(c) + 1, 2 * ifs.base ** k) for c in row), radius) for row in corners)
    cover = CoverApproximation(
        balls,
        kappa=2 * lam,
        level_r=radius,
        locally_bounded_table={L: Fraction(4) for L in LB_LEVELS},
        covers_space=True,
        ifs=ifs,
        level=k,
        label=f"net:{ifs.name}:{k}:{lam}",
    )
    # seed the integer representation directly (denominator 2 b^k lam_den)
    D = 2 * ifs.base ** k * lam.denominator
    cen = (2 * corners + 1) * lam.denominator
    rad = np.full(len(corners), int(radius * D), dtype=np.int64)
    cover.__dict__["int_repr"] = (D, cen.astype(np.int64), rad)
    return cover


def cover_from_balls(balls: Iterable[Ball], kappa=1, ifs=None, level=None, covers_space=False,
                     table=None, label="") -> CoverApproximation:
    balls = tuple(balls)
    radii = [b.radius for b in balls]
    level_r = radii[0] if radii and all(r == radii[0] for r in radii) else None
    return CoverApproximation(balls, kappa=as_fraction(kappa) if not isinstance(kappa, float) else kappa,
                              level_r=level_r, locally_bounded_table=table or {}, covers_space=covers_space,
                              ifs=ifs, level=level, label=label)


# -- verification --------------------------------------------------------

@dataclass
class CheckResult:
    passed: bool | None
    counterexample: object = None
    detail: str = ""


@dataclass
class ApproximationReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks.values())

    def failing(self) -> list:
        return [k for k, c in self.checks.items() if c.passed is False]

    def to_dict(self) -> dict:
        return {k: {"passed": c.passed, "counterexample": _jsonable(c.counterexample), "detail": c.detail}
                for k, c in self.checks.items()}


def _jsonable(x):
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def verify_approximation(c: CoverApproximation) -> ApproximationReport:
    """Check roundness, core disjointness, coverage and the local-boundedness table."""
    rep = ApproximationReport()
    kappa = c.kappa
    if not c.balls:
        rep.checks["roundness"] = CheckResult(False, None, "empty collection")
        return rep
    # roundness: stored set is the ball itself
    bad = [i for i, b in enumerate(c.balls) if not (b.radius > 0)]
    rep.checks["roundness"] = CheckResult(kappa >= 1 and not bad, bad[0] if bad else None,
                                          f"kappa={kappa}")
    if not c.exact:
        rep.checks["core_disjointness"] = CheckResult(None, None, "non-rational collection")
        rep.checks["coverage"] = CheckResult(None, None, "non-rational collection")
        rep.checks["local_boundedness"] = CheckResult(None, None, "non-rational collection")
        return rep
    kap = as_fraction(kappa) if not isinstance(kappa, float) else Fraction(kappa).limit_denominator(10 ** 9)
    # core disjointness: |z_i - z_j| >= (r_i + r_j)/kappa
    if c.covers_space:
        pairs = c.candidate_pairs(factor=1 / float(kap))
        viol = exact_pairs_within(c, pairs, kap.denominator, kap.numerator, strict=True)
        hit = pairs[viol]
        rep.checks["core_disjointness"] = CheckResult(
            len(hit) == 0, tuple(int(x) for x in hit[0]) if len(hit) else None, f"{len(pairs)} candidate pairs")
    else:
        rep.checks["core_disjointness"] = CheckResult(None, None, "collection does not assert a cover")
    rep.checks["coverage"] = _check_coverage(c)
    rep.checks["local_boundedness"] = _check_local_bounds(c)
    return rep


def _check_coverage(c: CoverApproximation) -> CheckResult:
    if c.ifs is None or c.level is None:
        return CheckResult(None, None, "no IFS attached")
    ifs, k = c.ifs, c.level
    D, cen, rad = c.int_repr
    corners = cell_corners(ifs, k)
    side = D // ifs.base ** k if D % ifs.base ** k == 0 else None
    if side is None:
        return CheckResult(None, None, "denominator incompatible with level")
    norm = c.norm
    # whole-cell fast path: the farthest box corner lies inside the nearest ball
    lo = corners * side
    q =  (corners + 0.5) / ifs.base ** k
    p = 2 if norm == EUCLIDEAN else np.inf
    _, nearest = c.tree.query(q, k=1, p=p)
    z = cen[nearest]
    far = np.maximum(np.abs(lo - z), np.abs(lo + side - z))
    fpow = (far * far).sum(axis=1) if norm == EUCLIDEAN else far.max(axis=1)
    rr = rad[nearest]
    inside = fpow < (rr * rr if norm == EUCLIDEAN else rr)
    todo = np.nonzero(~inside)[0]
    if len(todo) == 0:
        return CheckResult(True, None, f"all {len(corners)} level-{k} cells inside single balls")
    # per-cell check of the depth-4 descendant centres
    offs = descendant_offsets(ifs, COVERAGE_DEPTH)
    fine = ifs.base ** COVERAGE_DEPTH
    scale = 2 * fine
    rmax = float(c.radii_f.max())
    for idx in todo:
        corner = corners[idx]
        pts = (corner[None, :] * fine + offs) * 2 + 1  # units of 1/(2 b^{k+4})
        qc = (corner + 0.5) / ifs.base ** k
        reach = rmax + math.sqrt(ifs.dimension) / ifs.base ** k
        cand = np.array(c.tree.query_ball_point(qc, reach * (1 + 1e-9), p=p), dtype=np.int64)
        covered = np.zeros(len(pts), dtype=bool)
        # compare in common units: points over scale*b^k, balls over D
        P = pts.astype(object) * D
        for j in cand:
            zc = np.array([int(v) for v in cen[j]], dtype=object) * (scale * ifs.base ** k)
            r = int(rad[j]) * scale * ifs.base ** k
            diff = P - zc[None, :]
            dp = (diff * diff).sum(axis=1) if norm == EUCLIDEAN else np.abs(diff).max(axis=1)
            covered |= (dp < (r * r if norm == EUCLIDEAN else r)).astype(bool)
            if covered.all():
                break
        if not covered.all():
            miss = pts[np.nonzero(~covered)[0][0]]
            witness = tuple(Fraction(int(v), scale * ifs.base ** k) for v in miss)
            return CheckResult(False, witness, f"level-{k + COVERAGE_DEPTH} centre uncovered")
    return CheckResult(True, None, f"{len(todo)} boundary cells checked point-wise")


def _check_local_bounds(c: CoverApproximation) -> CheckResult:
    table = c.lb_table
    if not table:
        return CheckResult(None, None, "no table")
    D, cen, rad = c.int_repr
    radii = sorted({int(r) for r in rad})
    for L, kL in sorted(table.items()):
        kL = as_fraction(kL)
        # only radius classes with ratio above kL can violate
        for ra in radii:
            for rb in radii:
                if Fraction(ra, rb) <= kL:
                    continue
                ia = np.nonzero(rad == ra)[0]
                ib = np.nonzero(rad == rb)[0]
                Lf = as_fraction(L)
                for i in ia:
                    diff = cen[ib] - cen[i]
                    dp = (diff * diff).sum(axis=1) if c.norm == EUCLIDEAN else np.abs(diff).max(axis=1)
                    s = (ra + rb)
                    lhs = dp * Lf.denominator ** (2 if c.norm == EUCLIDEAN else 1)
                    rhs = (Lf.numerator * s) ** 2 if c.norm == EUCLIDEAN else Lf.numerator * s
                    hit = np.nonzero(lhs < rhs)[0]
                    if len(hit):
                        return CheckResult(False, (int(i), int(ib[hit[0]]), L),
                                           f"r_U/r_V = {Fraction(ra, rb)} > kappa_{L} = {kL}")
    return CheckResult(True, None, f"{len(radii)} radius classes")


def subcover_in_ball(c: CoverApproximation, b: Ball, mode: str = "intersects") -> CoverApproximation:
    """Filter cover elements against a query ball.

    ``intersects`` keeps elements whose closure meets the closed query ball
    (tangent elements count); ``contained`` keeps elements inside the query ball.
    """
    if mode not in ("intersects", "contained"):
        raise ValueError("mode must be 'intersects' or 'contained'")
    if mode == "intersects":
        keep = [u for u in c.balls if balls_touch(u, b, c.norm)]
    else:
        keep = [u for u in c.balls if ball_contains_ball(b, u, c.norm)]
    if len(keep) == len(c.balls):
        return c
    return c.with_balls(keep, covers_space=False, label=f"{c.label}|{mode}")
