"""Discrete p-modulus of vertex-subset families by constraint generation.

The restricted problems  min sum rho^p  s.t.  A rho >= 1, rho >= 0  are solved
through their concave dual

    g(lam) = sum(lam) - (p - 1) * sum((A^T lam / p) ** q),    q = p / (p - 1),

whose maximiser gives rho = (A^T lam / p) ** (1 / (p - 1)).  Accelerated
projected ascent finds the active set, a Newton solve on that set polishes it.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph  # noqa: F401

from .incidence import (
    ConnectionProblem,
    ConstraintSet,
    VertexPathOracle,
    kl_problem,
    traces_constraints,
    witness_family,
)

OPTIMAL = "optimal"
ITERATION_CAP = "iteration-cap"
INFEASIBLE = "infeasible-empty-constraint"
TRIVIAL = "trivial-no-path"

P_MIN, P_MAX = 1.0, 8.0
ADD_BELOW = 1 - 1e-9
CERTIFY = 1 - 1e-7
ACTIVE_SLACK = 1e-7
MAX_ROUNDS = 10_000
REL_TOL = 1e-6
EXPLICIT_REL_TOL = 1e-9
INNER_START = 1e-4
INNER_FLOOR = 1e-11


@dataclass(frozen=True)
class Density:
    """Nonnegative weights on cover elements, indexed 0..n-1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or (w < 0).any() or not np.isfinite(w).all():
            raise ValueError("density weights must be a finite nonnegative vector")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i):
        return float(self.weights[i])

    def energy(self, p: float) -> float:
        return float(np.sum(self.weights ** p))

    def path_weight(self, subset) -> float:
        return float(self.weights[list(subset)].sum()) if len(subset) else 0.0

    def histogram(self, bins: int = 10) -> dict:
        w = self.weights
        if len(w) == 0 or w.max() == 0:
            return {"edges": [0.0, 0.0], "counts": [len(w)]}
        counts, edges = np.histogram(w, bins=bins)
        return {"edges": [float(x) for x in edges], "counts": [int(x) for x in counts]}


@dataclass
class ModulusResult:
    value: float
    optimal_density: Density
    active_constraints: list
    p: float
    iterations: int = 0
    separation_calls: int = 0
    status: str = OPTIMAL
    bracket: tuple = (0.0, 0.0)
    constraint_count: int = 0
    seconds: float = 0.0
    min_path_weight: float = math.inf

    @property
    def trivial(self) -> bool:
        return self.status == TRIVIAL

    @property
    def infinite(self) -> bool:
        return self.status == INFEASIBLE

    def to_dict(self) -> dict:
        v = self.value
        return {
            "value": "inf" if math.isinf(v) else v,
            "p": self.p,
            "status": self.status,
            "bracket": ["inf" if math.isinf(x) else x for x in self.bracket],
            "iterations": self.iterations,
            "separation_calls": self.separation_calls,
            "constraint_count": self.constraint_count,
            "active_count": len(self.active_constraints),
            "min_path_weight": None if math.isinf(self.min_path_weight) else self.min_path_weight,
            "density_histogram": self.optimal_density.histogram(),
            "seconds": self.seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


CSV_COLUMNS = ("ifs", "k", "p", "L", "value", "status", "seconds")


def csv_rows(rows) -> str:
    """Batch table in CSV form; each row a mapping with the standard columns."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _check_p(p):
    p = float(p)
    if not (P_MIN < p <= P_MAX):
        raise ValueError(f"exponent p={p} outside (1, 8]")
    return p


# -- restricted problem ---------------------------------------------------------

def _matrix(rows, n):
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    idx = np.concatenate([np.asarray(r, dtype=np.int64) for r in rows]) if rows else np.zeros(0, np.int64)
    return sp.csr_matrix((np.ones(len(idx)), idx, indptr), shape=(len(rows), n))


class _Dual:
    def __init__(self, A, p):
        self.A = A
        self.AT = A.T.tocsr()
        self.p = p
        self.q = p / (p - 1)
        self.e = 1 / (p - 1)

    def rho(self, lam):
        s = self.AT @ lam
        return np.maximum(s, 0.0) / self.p, s

    def density(self, lam):
        base, _ = self.rho(lam)
        return base ** self.e

    def f(self, lam):
        """Negated dual (convex) and its gradient."""
        base, _ = self.rho(lam)
        r = base ** self.e
        val = (self.p - 1) * float(np.sum(base ** self.q)) - float(lam.sum())
        return val, self.A @ r - 1.0, r


def _gap(dual: _Dual, lam, fval=None):
    """Relative gap between the rescaled primal energy and the dual value."""
    base, _ = dual.rho(lam)
    rho = base ** dual.e
    w = dual.A @ rho
    lo = float(w.min()) if len(w) else 1.0
    if lo <= 0:
        return math.inf
    energy = float(np.sum(rho ** dual.p)) / min(1.0, lo) ** dual.p
    lower = -(dual.f(lam)[0] if fval is None else fval)
    return (energy - lower) / max(energy, 1e-300)


def _fista(dual: _Dual, lam, iters=20000, tol=1e-9, check=20):
    """Projected accelerated descent on the negated dual with backtracking and restart."""
    x = lam.copy()
    y = x.copy()
    fx, _, _ = dual.f(x)
    t = 1.0
    step = 1.0
    for it in range(iters):
        fy, gy, _ = dual.f(y)
        while True:
            xn = np.maximum(y - step * gy, 0.0)
            d = xn - y
            fn, _, _ = dual.f(xn)
            if fn <= fy + gy @ d + (d @ d) / (2 * step) + 1e-15 * abs(fy):
                break
            step *= 0.5
            if step < 1e-16:
                break
        if fn > fx:  # restart momentum
            t = 1.0
            y = x.copy()
            continue
        tn = (1 + math.sqrt(1 + 4 * t * t)) / 2
        y = np.maximum(xn + ((t - 1) / tn) * (xn - x), 0.0)
        stalled = abs(fx - fn) <= 1e-15 * max(1.0, abs(fn))
        x, fx, t = xn, fn, tn
        step *= 1.2
        if stalled or (it % check == 0 and _gap(dual, x, fx) <= tol):
            break
    return x


def _gram_solve(AJ, dd, rhs):
    """Solve (AJ diag(dd) AJ^T) x = rhs, minimum-norm when the system is singular."""
    cols = np.nonzero(dd > 0)[0]
    if len(rhs) <= len(cols):
        Jm = (AJ.multiply(dd[None, :]) @ AJ.T).toarray()
        try:
            x = np.linalg.solve(Jm, rhs)
            if np.isfinite(x).all():
                return x
        except np.linalg.LinAlgError:
            pass
    # more rows than supporting vertices: factor the Gram matrix as M M^T with M thin
    M = (AJ[:, cols].multiply(np.sqrt(dd[cols])[None, :])).toarray()
    z = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return np.linalg.lstsq(M.T, z, rcond=None)[0]


def _newton_polish(dual: _Dual, lam, rounds=60):
    """Active-set Newton: solve a_j . rho(lam) = 1 on J, then fix signs and violations."""
    A = dual.A.tocsr()
    m = A.shape[0]
    lam = lam.copy()
    r = dual.density(lam)
    viol = A @ r
    J = set(np.nonzero(lam > 1e-14)[0]) | set(np.nonzero(viol < 1 - 1e-12)[0])
    if not J:
        return lam
    for _ in range(rounds):
        Jl = np.array(sorted(J), dtype=np.int64)
        AJ = A[Jl]
        lj = lam[Jl].copy()
        if not (lj > 0).any():
            lj[:] = 1.0 / len(Jl)
        for _ in range(60):
            s = AJ.T @ lj
            base = np.maximum(s, 0.0) / dual.p
            rr = base ** dual.e
            F = AJ @ rr - 1.0
            nf = float(np.abs(F).max())
            if nf < 1e-14:
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                dd = np.where(s > 0, rr / ((dual.p - 1) * s), 0.0)
            delta = _gram_solve(AJ, dd, -F)
            a = 1.0
            improved = False
            while a > 1e-8:
                ln = lj + a * delta
                s2 = AJ.T @ ln
                F2 = AJ @ ((np.maximum(s2, 0.0) / dual.p) ** dual.e) - 1.0
                if np.abs(F2).max() < nf:
                    lj = ln
                    improved = True
                    break
                a *= 0.5
            if not improved:
                break
        trial = np.zeros(m)
        trial[Jl] = lj
        neg = Jl[lj < 0]
        if len(neg):
            # step back to the feasible boundary along the segment from lam
            cur = lam[Jl]
            dirn = lj - cur
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(dirn < 0, -cur / dirn, np.inf)
            a = float(min(1.0, np.min(ratios)))
            lam[Jl] = np.maximum(cur + a * dirn, 0.0)
            J -= set(Jl[lam[Jl] <= 1e-15])
            lam[lam <= 1e-15] = 0.0
            if not J:
                J = set(np.nonzero(A @ dual.density(lam) < 1 - 1e-12)[0])
            continue
        if nf >= 1e-12 and len(Jl) > 1:
            # degenerate active set: the smallest multiplier is heading to zero
            lam = trial
            drop = Jl[int(np.argmin(lj))]
            J.discard(drop)
            lam[drop] = 0.0
            continue
        lam = trial
        r = dual.density(lam)
        viol = np.nonzero(A @ r < 1 - 1e-12)[0]
        newv = set(viol) - J
        if not newv:
            break
        J |= newv
    return lam


def _barrier(A, dual: _Dual, p, gap_tol=1e-11):
    """Primal log-barrier Newton method on the support of the rows.

    Slower than the dual route but indifferent to degenerate active sets.
    Returns the full density and the barrier multipliers.
    """
    m, n = A.shape
    support = np.unique(A.indices)
    As = A[:, support].tocsr()
    k = len(support)
    x = np.full(k, 1.5)
    t = 1.0

    def phi(x, t):
        sl = As @ x - 1.0
        if (sl <= 0).any() or (x <= 0).any():
            return math.inf
        return t * float(np.sum(x ** p)) - float(np.log(sl).sum()) - float(np.log(x).sum())

    AsT = As.T.tocsr()
    for _ in range(200):
        for _ in range(100):
            sl = As @ x - 1.0
            g = t * p * x ** (p - 1) - AsT @ (1.0 / sl) - 1.0 / x
            hd = t * p * (p - 1) * x ** (p - 2) + 1.0 / x ** 2
            w = 1.0 / sl ** 2
            # rows are short, so the k x k normal matrix is cheap to assemble sparsely
            H = (AsT @ sp.diags(w) @ As).toarray()
            H[np.diag_indices(k)] += hd
            try:
                dx = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                dx = np.linalg.lstsq(H, -g, rcond=None)[0]
            dec = float(-g @ dx)
            if dec / 2 < 1e-12:
                break
            a = 1.0
            f0 = phi(x, t)
            while a > 1e-14:
                xn = x + a * dx
                if (xn > 0).all() and ((As @ xn) > 1.0).all() and phi(xn, t) <= f0 - 0.25 * a * dec:
                    break
                a *= 0.5
            if a <= 1e-14:
                break
            x = x + a * dx
        energy = float(np.sum(x ** p))
        if (m + k) / t <= gap_tol * max(energy, 1e-300):
            break
        t *= 8.0
    rho = np.zeros(n)
    rho[support] = x
    lam = 1.0 / (t * (As @ x - 1.0))
    return rho, lam


def _quality(A, dual, rho, lam, p):
    """(admissible energy, dual lower bound, relative gap) of a restricted solution."""
    w = A @ rho
    lo = float(w.min()) if len(w) else 1.0
    if lo <= 0:
        return math.inf, -math.inf, math.inf
    energy = float(np.sum((rho / min(1.0, lo)) ** p))
    lower = -dual.f(lam)[0]
    return energy, lower, (energy - lower) / max(energy, 1e-300)


NEWTON_MAX_ROWS = 400
BARRIER_MAX_SUPPORT = 600


def solve_restricted(rows, n, p, lam0=None, gap_tol=1e-9):
    """Solve min sum rho^p over rho >= 0 with sum_{P} rho >= 1 for each listed row.

    Returns (rho, lam, dual_value, relative_gap).
    """
    A = _matrix(rows, n)
    narrow = len(np.unique(A.indices)) <= BARRIER_MAX_SUPPORT
    dual = _Dual(A, p)
    lam = np.zeros(len(rows)) if lam0 is None else np.asarray(lam0, float).copy()
    if lam0 is None or not (lam > 0).any():
        lam[:] = 1.0 / max(len(rows), 1)
    # narrow problems only need a warm-up before the second-order steps
    lam = _fista(dual, lam, iters=300 if narrow else 20000, tol=gap_tol)
    rho = dual.density(lam)
    _, lower, gap = _quality(A, dual, rho, lam, p)
    best = [rho, lam, lower, gap]

    def polish(start):
        # with many rows, only those carrying weight enter the active-set Newton
        if len(rows) > NEWTON_MAX_ROWS:
            start = np.where(start > 1e-8 * float(start.max(initial=0.0)), start, 0.0)
            if not 0 < np.count_nonzero(start) <= NEWTON_MAX_ROWS:
                return
        lam_n = _newton_polish(dual, start)
        rho_n = dual.density(lam_n)
        _, lower_n, gap_n = _quality(A, dual, rho_n, lam_n, p)
        if gap_n < best[3]:
            best[:] = [rho_n, lam_n, lower_n, gap_n]

    if best[3] > gap_tol:
        polish(lam)
    if best[3] > gap_tol and narrow:
        rho_b, lam_b = _barrier(A, dual, p)
        _, lower_b, gap_b = _quality(A, dual, rho_b, lam_b, p)
        if gap_b < best[3]:
            best[:] = [rho_b, lam_b, lower_b, gap_b]
        if best[3] > gap_tol:
            polish(lam_b)
    return tuple(best)


# -- separation oracles ------------------------------------------------------------

class _ExplicitOracle:
    def __init__(self, cs: ConstraintSet):
        self.rows = [np.asarray(P, dtype=np.int64) for P in cs.subsets]
        self.A = _matrix(self.rows, cs.n_vertices)

    def violated(self, rho, batch):
        w = self.A @ rho
        order = np.argsort(w, kind="stable")
        wmin = float(w[order[0]]) if len(w) else math.inf
        out = [tuple(self.rows[i]) for i in order[:batch] if w[i] < ADD_BELOW]
        return wmin, out

    def seed(self, k):
        lengths = np.array([len(r) for r in self.rows])
        order = np.argsort(lengths, kind="stable")[:k]
        return [tuple(self.rows[i]) for i in order]


class _PathOracle:
    def __init__(self, problem: ConnectionProblem):
        self.oracle = VertexPathOracle(problem.graph, problem.source, problem.target)

    def violated(self, rho, batch):
        found = self.oracle.shortest(rho, k=batch, below=ADD_BELOW)
        if not found:
            return math.inf, []
        wmin = found[0][0]
        return wmin, [path for w, path in found if w < ADD_BELOW]

    def seed(self, k):
        found = self.oracle.shortest(np.ones(self.oracle.n), k=k)
        return [path for _, path in found]


# -- flow formulation -----------------------------------------------------------

class _FlowNetwork:
    """Directed arcs S -> source, u <-> v for each incidence edge, target -> T.

    Only vertices in components holding both a source and a target can carry
    flow; the rest are dropped (their weight is zero in every optimal density).
    """

    def __init__(self, problem: ConnectionProblem):
        g = problem.graph
        n = g.n
        edges = g.edges
        adj = sp.csr_matrix((np.ones(2 * len(edges)), (np.r_[edges[:, 0], edges[:, 1]], np.r_[edges[:, 1], edges[:, 0]])),
                            shape=(n, n)) if len(edges) else sp.csr_matrix((n, n))
        ncomp, label = sp.csgraph.connected_components(adj, directed=False)
        src = np.asarray(problem.source, dtype=np.int64)
        tgt = np.asarray(problem.target, dtype=np.int64)
        good = np.intersect1d(label[src], label[tgt]) if len(src) and len(tgt) else np.zeros(0, np.int64)
        keep = np.isin(label, good)
        self.n = n
        self.keep = keep
        self.src = src[keep[src]]
        self.tgt = tgt[keep[tgt]]
        e = edges[keep[edges[:, 0]]] if len(edges) else edges
        S, T = n, n + 1
        tails = [e[:, 0], e[:, 1], np.full(len(self.src), S), self.tgt]
        heads = [e[:, 1], e[:, 0], self.src, np.full(len(self.tgt), T)]
        self.tail = np.concatenate(tails).astype(np.int64)
        self.head = np.concatenate(heads).astype(np.int64)
        self.n_pair = 2 * len(e)
        na = len(self.tail)
        self.na = na
        # B: conservation rows for every node except T
        rows = np.r_[self.tail, self.head]
        vals = np.r_[np.ones(na), -np.ones(na)]
        cols = np.r_[np.arange(na), np.arange(na)]
        m = rows != T
        self.B = sp.csr_matrix((vals[m], (rows[m], cols[m])), shape=(n + 1, na))
        self.b = np.zeros(n + 1)
        self.b[S] = 1.0
        # C: arc -> vertex it enters (arcs into T carry no cost)
        into = self.head < n
        self.C = sp.csr_matrix((np.ones(int(into.sum())), (self.head[into], np.nonzero(into)[0])), shape=(n, na))
        self.adj = adj

    def initial_flow(self) -> np.ndarray:
        """Strictly positive unit flow: averaged BFS paths plus small two-cycles."""
        n = self.n
        d_t = sp.csgraph.dijkstra(self.adj, unweighted=True, indices=self.tgt, min_only=True)
        d_s = sp.csgraph.dijkstra(self.adj, unweighted=True, indices=self.src, min_only=True)
        indptr, indices = self.adj.indptr, self.adj.indices
        arc_id = {}
        for i in range(self.na):
            arc_id[(int(self.tail[i]), int(self.head[i]))] = i
        S, T = n, n + 1
        x = np.zeros(self.na)

        def descend(v, dist):
            path = [v]
            while dist[v] > 0:
                nb = indices[indptr[v]:indptr[v + 1]]
                v = int(nb[np.argmin(dist[nb])])
                path.append(v)
            return path

        count = 0
        for v in self.src:
            path = descend(int(v), d_t)
            nodes = [S] + path + [T]
            for a, b in zip(nodes, nodes[1:]):
                x[arc_id[(a, b)]] += 1.0
            count += 1
        for w in self.tgt:
            path = descend(int(w), d_s)[::-1]
            nodes = [S] + path + [T]
            for a, b in zip(nodes, nodes[1:]):
                x[arc_id[(a, b)]] += 1.0
            count += 1
        x /= count
        x[: self.n_pair] += 0.1 / count
        return x


def _flow_ipm(net: _FlowNetwork, p, gap_tol=1e-12, mu=16.0, score=None, target=0.0):
    """Barrier method for min sum_v s_v^q over unit flows, s = C x (vertex throughput)."""
    from scipy.sparse.linalg import splu

    q = p / (p - 1)
    B, C, b = net.B, net.C, net.b
    CT = C.T.tocsr()
    BT = B.T.tocsr()
    x = net.initial_flow()
    na = net.na

    def phi(x):
        s = C @ x
        return float(np.sum(s ** q))

    t = 1.0 / max(phi(x), 1e-300)
    newton = 0
    best_gap, best_x = math.inf, None
    for _ in range(100):
        for _ in range(60):
            s = C @ x
            g = t * (CT @ (q * s ** (q - 1))) - 1.0 / x
            dinv = x * x
            with np.errstate(divide="ignore"):
                W = t * q * (q - 1) * np.where(s > 0, s ** (q - 2), np.inf)
            sigma = C @ dinv
            M = np.where(np.isinf(W), 1.0 / np.maximum(sigma, 1e-300), W / (1.0 + W * sigma))

            def hinv(v):
                u = dinv * v
                return u - dinv * (CT @ (M * (C @ u)))

            G = B.multiply(dinv[None, :]) @ CT
            K = (B.multiply(dinv[None, :]) @ BT) - G @ sp.diags(M) @ G.T
            rhs = -(B @ hinv(g))
            try:
                nu = splu(K.tocsc()).solve(rhs)
            except RuntimeError:
                nu = np.linalg.lstsq(K.toarray(), rhs, rcond=None)[0]
            dx = -hinv(g + BT @ nu)
            dec = float(-g @ dx)
            newton += 1
            if dec / 2 <= 1e-9:
                break
            neg = dx < 0
            a = min(1.0, 0.99 * float(np.min(-x[neg] / dx[neg]))) if neg.any() else 1.0
            f0 = t * phi(x) - float(np.log(x).sum())
            while a > 1e-14:
                xn = x + a * dx
                if (xn > 0).all() and t * phi(xn) - float(np.log(xn).sum()) <= f0 - 0.25 * a * dec:
                    break
                a *= 0.5
            x = x + a * dx
        val = phi(x)
        if score is not None:
            # the certified bracket can degrade as the barrier closes in, so keep the best iterate
            xp = _project_flow(B, b, x)
            gap = score(xp)
            if gap < best_gap:
                best_gap, best_x = gap, xp
            if gap <= target:
                break
        if na / t <= gap_tol * val:
            break
        t *= mu
    if score is not None:
        return best_x, newton
    return _project_flow(B, b, x), newton


def _project_flow(B, b, x, rounds=3):
    """Weighted least-norm correction making B x = b to machine precision, x >= 0."""
    from scipy.sparse.linalg import splu

    for _ in range(rounds):
        r = b - B @ x
        if np.abs(r).max() <= 1e-15:
            break
        D = x * x
        K = (B.multiply(D[None, :]) @ B.T).tocsc()
        y = splu(K).solve(r)
        x = np.maximum(x + D * (B.T @ y), 0.0)
    return x


def _decompose(net: _FlowNetwork, x, tol):
    """Greedy path decomposition of a unit flow: [(vertex tuple, amount)], heaviest arcs first."""
    n = net.n
    S, T = n, n + 1
    order = np.lexsort((-x, net.tail))
    tails = net.tail[order]
    starts = np.searchsorted(tails, np.arange(n + 3))
    out = [order[starts[v]:starts[v + 1]] for v in range(n + 2)]
    res = x.copy()
    paths = {}
    for _ in range(4 * net.na):
        if res[out[S]].max(initial=0.0) <= tol:
            break
        nodes, arcs = [S], []
        pos = {S: 0}
        ok = True
        while nodes[-1] != T:
            cand = out[nodes[-1]]
            e = cand[int(np.argmax(res[cand]))] if len(cand) else None
            if e is None or res[e] <= tol:
                ok = False
                break
            nxt = int(net.head[e])
            if nxt in pos:
                # cancel the cycle and resume from its entry node
                i = pos[nxt]
                cyc = arcs[i:] + [e]
                res[cyc] -= res[cyc].min()
                for v in nodes[i + 1:]:
                    del pos[v]
                nodes, arcs = nodes[: i + 1], arcs[:i]
                continue
            arcs.append(e)
            nodes.append(nxt)
            pos[nxt] = len(nodes) - 1
        if not ok:
            if arcs:
                res[arcs[-1]] = 0.0
            else:
                break
            continue
        amt = float(res[arcs].min())
        res[arcs] -= amt
        verts = tuple(sorted({int(net.head[e]) for e in arcs if net.head[e] < n}))
        paths[verts] = paths.get(verts, 0.0) + amt
    return sorted(paths.items(), key=lambda kv: -kv[1])


def _flow_bounds(problem: ConnectionProblem, p, rel_tol=REL_TOL):
    """Flow route: (lower bound, admissible density, supporting chains with weights, Newton steps, phi)."""
    net = _FlowNetwork(problem)
    if len(net.src) == 0 or len(net.tgt) == 0:
        return None
    q = p / (p - 1)
    oracle = VertexPathOracle(problem.graph, problem.source, problem.target)

    def bounds(x):
        # any unit flow gives the lower bound phi^-(p-1); its throughput^(q-1) is near optimal
        s = net.C @ x
        phi = float(np.sum(s ** q))
        rho = np.where(net.keep, np.maximum(s, 0.0) ** (q - 1), 0.0)
        dist, _ = oracle.solve(rho)
        wmin = float(dist[oracle.target].min())
        return phi, rho, wmin

    def score(x):
        phi, rho, wmin = bounds(x)
        if not wmin > 0:
            return math.inf
        energy = float(np.sum(rho ** p)) / wmin ** p
        return (energy - phi ** (-(p - 1))) / energy

    x, newton = _flow_ipm(net, p, gap_tol=1e-12, score=score, target=0.1 * rel_tol)
    phi, rho, wmin = bounds(x)
    lower = phi ** (-(p - 1))
    support = _decompose(net, x, DECOMPOSE_TOL * float(x.max()))[:SEED_MAX]
    return lower, rho / wmin, support, newton, phi


def _generate(oracle, rows, n, p, batch, max_rounds, rel_tol, lam0=None):
    """Constraint generation from the given seed rows."""
    seen = set(rows)
    lam = lam0
    rho = np.zeros(n)
    lower = 0.0
    calls = 0
    status = ITERATION_CAP
    wmin = 0.0
    rounds = 0
    tol = INNER_START
    for rounds in range(1, max_rounds + 1):
        if lam is not None and len(lam) < len(rows):
            lam = np.concatenate([lam, np.zeros(len(rows) - len(lam))])
        rho, lam, lower, gap = solve_restricted(rows, n, p, lam, tol)
        calls += 1
        wmin, new = oracle.violated(rho, batch)
        if wmin >= CERTIFY:
            energy = float(np.sum(rho ** p)) / min(1.0, wmin) ** p
            if (energy - lower) <= rel_tol * energy:
                status = OPTIMAL
                break
            if tol <= INNER_FLOOR:
                break
            tol = max(tol * 1e-2, INNER_FLOOR)
            continue
        added = 0
        for P in new:
            if P not in seen:
                seen.add(P)
                rows.append(P)
                added += 1
        if not added:
            # cheapest violated rows are already present: the inner solve is not tight enough
            if tol <= INNER_FLOOR:
                break
            tol = max(tol * 1e-2, INNER_FLOOR)
    if wmin <= 0:
        return rho, lower, ITERATION_CAP, rounds, calls, wmin
    return rho / min(1.0, wmin), lower, status, rounds, calls, wmin


FLOW_MIN_VERTICES = 120
DECOMPOSE_TOL = 1e-9
SEED_MAX = 4000


def solve_modulus(problem, p, *, batch: int = 64, max_rounds: int = MAX_ROUNDS, method: str = "auto",
                  rel_tol: float | None = None) -> ModulusResult:
    """Discrete p-modulus of a ConstraintSet or of the chain family of a ConnectionProblem.

    Connection problems are solved by constraint generation over chains
    (``method="paths"``), or first through the equivalent minimum-cost flow
    problem (``method="flow"``), whose near-active chains then seed the
    generation when the flow bracket is wider than ``rel_tol``.  ``"auto"``
    takes the flow route on larger graphs.  The reported bracket always pairs
    a certified lower bound with the energy of an admissible density.
    ``rel_tol`` defaults to 1e-6 for connection problems and 1e-9 for
    explicit constraint sets.
    """
    p = _check_p(p)
    if rel_tol is None:
        rel_tol = REL_TOL if isinstance(problem, ConnectionProblem) else EXPLICIT_REL_TOL
    t0 = time.perf_counter()
    if method not in ("auto", "paths", "flow"):
        raise ValueError(f"unknown method {method!r}")
    flow = None
    if isinstance(problem, ConnectionProblem):
        n = problem.graph.n
        if problem.trivial:
            return ModulusResult(0.0, Density(np.zeros(n)), [], p, status=TRIVIAL, bracket=(0.0, 0.0))
        oracle = _PathOracle(problem)
        if oracle.violated(np.zeros(n), 1)[0] == math.inf:
            return ModulusResult(0.0, Density(np.zeros(n)), [], p, status=TRIVIAL, bracket=(0.0, 0.0))
        if method == "flow" or (method == "auto" and n >= FLOW_MIN_VERTICES):
            flow = _flow_bounds(problem, p, rel_tol)
    elif isinstance(problem, ConstraintSet):
        n = problem.n_vertices
        if problem.has_empty:
            return ModulusResult(math.inf, Density(np.zeros(n)), [()], p, status=INFEASIBLE,
                                 bracket=(math.inf, math.inf), constraint_count=len(problem))
        if len(problem) == 0:
            return ModulusResult(0.0, Density(np.zeros(n)), [], p, status=TRIVIAL, bracket=(0.0, 0.0))
        oracle = _ExplicitOracle(problem)
    else:
        raise TypeError("expected a ConnectionProblem or ConstraintSet")

    best_lower, best, iters, calls, rows = 0.0, None, 0, 0, []
    if flow is not None:
        f_lower, f_rho, support, newton, phi = flow
        best_lower, best, iters, calls = f_lower, f_rho, newton, 1
        rows = [P for P, _ in support]
    f_energy = float(np.sum(best ** p)) if best is not None else math.inf
    if best is None or f_energy - best_lower > rel_tol * f_energy:
        if not rows:
            rows = list(dict.fromkeys(oracle.seed(batch)))
        lam0 = None
        if flow is not None:
            lam0 = np.array([p * mu / phi ** (p - 1) for _, mu in support])
        rho, lower, _, rounds, c2, _ = _generate(oracle, rows, n, p, batch, max_rounds, rel_tol, lam0)
        iters += rounds
        calls += c2
        best_lower = max(best_lower, lower)
        e2 = float(np.sum(rho ** p))
        if best is None or e2 < f_energy:
            best, f_energy = rho, e2
    final = best
    energy = float(np.sum(final ** p))
    wmin, _ = oracle.violated(final, 1)
    lower = min(best_lower, energy)
    status = OPTIMAL if wmin >= CERTIFY and energy - lower <= rel_tol * energy else ITERATION_CAP
    if rows:
        A = _matrix(rows, n)
        slack = A @ final - 1.0
        active = [rows[i] for i in np.nonzero(slack <= ACTIVE_SLACK)[0]]
    else:
        active = []
    return ModulusResult(energy, Density(final), active, p, iterations=iters, separation_calls=calls + 1,
                         status=status, bracket=(lower, energy), constraint_count=len(rows),
                         seconds=time.perf_counter() - t0, min_path_weight=wmin)


# -- brute-force oracle -----------------------------------------------------------

def brute_force_modulus(constraints: ConstraintSet, p, starts: int = 8, seed: int = 0) -> float:
    """Dense primal solve over the full constraint list (small instances only)."""
    from scipy.optimize import minimize

    p = _check_p(p)
    n = constraints.n_vertices
    if n > 14 or len(constraints) > 64:
        raise ValueError("brute force limited to 14 vertices and 64 constraints")
    if constraints.has_empty:
        return math.inf
    if len(constraints) == 0:
        return 0.0
    A = np.zeros((len(constraints), n))
    for i, P in enumerate(constraints.subsets):
        A[i, list(P)] = 1.0
    rng = np.random.default_rng(seed)
    best = math.inf
    cons = [{"type": "ineq", "fun": lambda x: A @ x - 1.0, "jac": lambda x: A}]
    for _ in range(starts):
        x0 = rng.uniform(0.2, 1.5, n)
        res = minimize(lambda x: np.sum(np.abs(x) ** p), x0,
                       jac=lambda x: p * np.sign(x) * np.abs(x) ** (p - 1),
                       bounds=[(0, None)] * n, constraints=cons, method="SLSQP",
                       options={"ftol": 1e-15, "maxiter": 2000})
        x = np.maximum(res.x, 0.0)
        w = float((A @ x).min())
        if w <= 0:
            continue
        x = x / min(1.0, w)
        best = min(best, float(np.sum(x ** p)))
    return best


# -- laws ----------------------------------------------------------------------

def random_constraints(rng, n: int, m: int, max_size: int | None = None) -> ConstraintSet:
    max_size = min(max_size or n, n)
    subs = []
    for _ in range(m):
        k = int(rng.integers(1, max_size + 1))
        subs.append(tuple(int(x) for x in rng.choice(n, size=k, replace=False)))
    return ConstraintSet(n, tuple(subs))


def check_laws(seed: int = 0, instances: int = 100, p: float = 2.0, tol: float = 1e-7) -> dict:
    """Monotonicity, subadditivity and majorization on random small families."""
    rng = np.random.default_rng(seed)
    report = {"instances": instances, "p": p, "monotonicity": 0, "subadditivity": 0, "majorization": 0,
              "failures": []}
    for i in range(instances):
        n = int(rng.integers(3, 10))
        big = random_constraints(rng, n, int(rng.integers(2, 9)))
        k = int(rng.integers(1, len(big) + 1))
        small = ConstraintSet(n, big.subsets[:k])
        other = random_constraints(rng, n, int(rng.integers(1, 6)))
        sol = {name: solve_modulus(cs, p) for name, cs in
               (("small", small), ("big", big), ("other", other), ("union", big.union(other)))}
        # shrink each constraint to a nonempty subset: more demanding family
        shrunk = ConstraintSet(n, tuple(P[: max(1, int(rng.integers(1, len(P) + 1)))] for P in big.subsets))
        sol["shrunk"] = solve_modulus(shrunk, p)
        lo = {k: v.bracket[0] for k, v in sol.items()}
        hi = {k: v.bracket[1] for k, v in sol.items()}
        # a law fails only if certified brackets separate by more than tol
        checks = {
            "monotonicity": lo["small"] <= hi["big"] + tol,
            "subadditivity": lo["union"] <= hi["big"] + hi["other"] + tol,
            "majorization": lo["big"] <= hi["shrunk"] + tol,
        }
        for name, ok in checks.items():
            if ok:
                report[name] += 1
            else:
                report["failures"].append({"instance": i, "law": name})
    report["passed"] = not report["failures"]
    return report


def exponent_transfer(result: ModulusResult, eps: float, problem=None) -> dict:
    """Upper bound (max rho)^eps * value for the (p + eps)-modulus of the same family."""
    if result.status != OPTIMAL:
        raise ValueError("exponent transfer needs an optimal result")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    w = result.optimal_density.weights
    mx = float(w.max()) if len(w) else 0.0
    bound = result.value if eps == 0 else (mx ** eps) * float(np.sum(w ** result.p))
    out = {"p": result.p, "eps": eps, "max_rho": mx, "bound": bound, "direct": None, "holds": None}
    if problem is not None and eps > 0 and result.p + eps <= P_MAX:
        direct = solve_modulus(problem, result.p + eps).value
        out["direct"] = direct
        out["holds"] = direct <= bound + 1e-7
    return out


def compare_kl_bk(c, B, L, witness_count: int = 8, p: float = 2.0) -> dict:
    """Keith-Laakso modulus against the Bourdon-Kleiner modulus of a witness curve family."""
    prob = kl_problem(c, B, L)
    kl = solve_modulus(prob, p)
    fam = witness_family(c, prob, witness_count)
    cs = traces_constraints(fam, c)
    bk = solve_modulus(cs, p)
    ratio = None
    if kl.value > 0 and math.isfinite(kl.value):
        ratio = bk.value / kl.value
    return {
        "kl": kl.value, "kl_status": kl.status,
        "bk": bk.value, "bk_status": bk.status,
        "curves": len(fam), "ratio": ratio,
        "holds": bk.value <= kl.value + 1e-7,
    }
