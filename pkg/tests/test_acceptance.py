"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed at the end of the session by the hook in conftest.py.
"""
import json
import math
import time
from fractions import Fraction as F

import numpy as np
import pytest

from confmod import cli
from confmod.dimension import center_orbits, estimate_dimension
from confmod.fractals import CARPET, SQUARE, net_cover
from confmod.geometry import Ball, PolyCurve, segment
from confmod.incidence import ConstraintSet, CurveFamilySpec
from confmod.modulus import brute_force_modulus, check_laws, compare_kl_bk, exponent_transfer, \
    random_constraints, solve_modulus
from confmod.pushdown import (CertificateFactory, EqualizeParams, WeightedCollection, equalize, replace,
                              rounds_needed, small_modulus_pipeline)
from confmod.store import ArtifactStore, cover_from_text, cover_to_text
from confmod.strong import StrongParams, content_admissible, recheck_witnesses, snowflake_invariance, \
    snowflake_tau, verify_strong_admissibility

from conftest import record

HALF = (F(1, 2), F(1, 2))


def check(number, passed, detail):
    record(number, bool(passed), detail)
    assert passed, detail


# -- 1 --------------------------------------------------------------------------------

def test_criterion_01_oracle_equivalence():
    rng = np.random.default_rng(20240601)
    worst, t0 = 0.0, time.perf_counter()
    for i in range(50):
        n = int(rng.integers(2, 13))
        cs = random_constraints(rng, n, int(rng.integers(1, 21)))
        p = [1.5, 2.0, 3.0][i % 3]
        fast = solve_modulus(cs, p, rel_tol=1e-9).value
        slow = brute_force_modulus(cs, p, seed=i)
        worst = max(worst, abs(fast - slow) / max(abs(slow), 1e-300))
    secs = time.perf_counter() - t0
    check(1, worst <= 1e-6 and secs < 60, f"50 instances, max rel err {worst:.2e}, {secs:.1f}s")


# -- 2 --------------------------------------------------------------------------------

def test_criterion_02_closed_forms():
    worst = 0.0
    for n in range(1, 5):
        for length in range(2, 7):
            cs = ConstraintSet(n * length, tuple(tuple(range(i * length, (i + 1) * length)) for i in range(n)))
            for p in (1.5, 2.0, 3.0):
                exact = n * length ** (1 - p)
                worst = max(worst, abs(solve_modulus(cs, p).value - exact))
    check(2, worst <= 1e-6, f"60 cases, max abs err {worst:.2e}")


# -- 3 --------------------------------------------------------------------------------

def test_criterion_03_laws():
    rep = check_laws(seed=7, instances=100, tol=1e-7)
    check(3, rep["passed"], f"100 instances, violations {len(rep['failures'])}")


# -- 4 --------------------------------------------------------------------------------

def sampled_balls(ifs):
    out = [Ball(z, F(1, ifs.base)) for z, _ in center_orbits(ifs, 1, reduce=False)]
    out.append(Ball(HALF, F(1, 2 * ifs.base)))
    return out


def test_criterion_04_kl_bounds_bk():
    ratios, bad, cases = [], [], 0
    for ifs, levels in ((CARPET, (1, 2, 3)), (SQUARE, (1, 2, 3, 4))):
        for k in levels:
            c = net_cover(ifs, k)
            for B in sampled_balls(ifs):
                rep = compare_kl_bk(c, B, 2)
                cases += 1
                if not rep["bk"] <= rep["kl"] + 1e-7:
                    bad.append((ifs.name, k, B.center))
                if rep["ratio"] is not None:
                    ratios.append(rep["ratio"])
    spread = f"BK/KL in [{min(ratios):.3g}, {max(ratios):.3g}]" if ratios else "no finite ratios"
    check(4, not bad, f"{cases} (B, L=2) cases, {len(bad)} violations, {spread}")


# -- 5 --------------------------------------------------------------------------------

def content_instances():
    rng = np.random.default_rng(5)
    for i in range(20):
        tau = [4, 5, 8][i % 3]
        p = [1.5, 2.0, 3.0][(i // 3) % 3]
        count = int(rng.integers(1, 5))
        curves = []
        for _ in range(count):
            y = F(int(rng.integers(1, 16)), 16)
            if rng.random() < 0.5:
                curves.append(segment((0, y), (1, y)))
            else:
                curves.append(PolyCurve(((0, y), (F(1, 2), F(1, 2)), (1, 1 - y))))
        delta = F(1, int(rng.choice([4, 8, 16])))
        eps = float(rng.choice([0.0, 0.25]))
        yield CurveFamilySpec(tuple(curves), 1), StrongParams(tau, p), delta, eps


def test_criterion_05_content_bound():
    rows, bad = 0, []
    for i, (fam, params, delta, eps) in enumerate(content_instances()):
        sb = content_admissible(fam, Ball(HALF, 1), 1, delta, params, eps=eps)
        diams = np.array([float(b.diameter()) for b in sb.collection.balls])
        bound = (20 * float(params.tau)) ** params.p * (float(np.sum(diams ** params.p)) + eps) / 1.0
        ver = verify_strong_admissibility(sb.density, sb.collection, fam, params)
        ok = sb.upper_value <= bound * (1 + 1e-12) and ver.admissible \
            and not recheck_witnesses(sb.density, sb.collection, fam, sb.verification())
        rows += 1
        if not ok:
            bad.append(i)
    check(5, not bad, f"{rows} instances, failing {bad}")


# -- 6 --------------------------------------------------------------------------------

def replace_instances(factory):
    rng = np.random.default_rng(6)
    slots = [F(k, 8) for k in range(1, 8)]
    for _ in range(29):
        R = F(1, int(rng.choice([64, 128])))
        pos = sorted(rng.choice(len(slots), size=int(rng.integers(1, 5)), replace=False).tolist())
        cs = [(slots[j], F(1, 2)) for j in pos]
        fam = CurveFamilySpec(tuple(PolyCurve(((x, y - F(1, 8)), (x, y + F(1, 8)))) for x, y in cs), F(1, 4))
        rho = 1 + rng.random(len(cs))
        w = WeightedCollection([Ball(c, R) for c in cs], rho, fam, 4, 8.0)
        chosen = [i for i in range(len(cs)) if rng.random() < 0.6] or [0]
        yield w, chosen, factory
    # two parents sharing a child ball
    balls = [Ball(HALF, F(1, 64)), Ball((F(1, 2) + F(3, 64), F(1, 2)), F(1, 64))]
    fam = CurveFamilySpec((PolyCurve(((F(1, 4), F(1, 2)), (F(3, 4), F(1, 2)))),), F(1, 2))
    w = WeightedCollection(balls, np.array([1.0, 0.8]), fam, 4, 8.0)
    a, b = factory(balls[0]), factory(balls[1])
    mid = Ball((F(1, 2) + F(3, 128), F(1, 2) + F(1, 64)), a.collection[0].radius)
    yield w, [0, 1], {0: a.with_extra(mid, 0.3), 1: b.with_extra(mid, 0.4)}


def test_criterion_06_pushdown_mechanics():
    factory = CertificateFactory("square", 4, 8.0, 0.25)
    n, bad, shared = 0, [], 0
    for i, (w, chosen, certs) in enumerate(replace_instances(factory)):
        out, rep = replace(w, chosen, certs, 0.25)
        n += 1
        shared += rep.shared
        if not (rep.energy_after <= rep.bound + 1e-9 and not out.audit()):
            bad.append(i)

    # equalize on the square at p = 3
    b = [Ball((F(3, 8), F(1, 2)), F(1, 64)), Ball((F(5, 8), F(1, 2)), F(1, 64))]
    fam = CurveFamilySpec(tuple(PolyCurve(((F(1, 4), F(1, 2) + d), (F(3, 4), F(1, 2) + d)))
                                for d in (0, F(1, 128), -F(1, 128))), F(1, 2))
    w = WeightedCollection(b, np.array([0.5, 0.5]), fam, 4, 3.0)
    fac3 = CertificateFactory("square", 4, 3.0, 0.9)
    prm = EqualizeParams.for_collection(w, 1.0, 0.5, fac3)
    res = equalize(w, prm, fac3)
    eq_ok = res.window_ok() and res.energy <= 1.0 and res.weight_rounds == prm.N

    # round count against the closed formula
    formula_ok = True
    for M in (0.5, 1, 3, 8, 100, 12345.6):
        for eps0 in (0.1, 1.0):
            for eps in (0.25, 0.5, 0.9):
                q = math.log2(max(M / eps0, 1)) / math.log2(1 / eps)
                formula_ok &= rounds_needed(M, eps0, eps) == math.ceil(q - 1e-12) + 1
    check(6, not bad and shared >= 1 and eq_ok and formula_ok,
          f"replace {n} instances ({len(bad)} failing, {shared} shared children); equalize energy "
          f"{res.energy:.4g}, window {res.window_ok()}; N formula {formula_ok}")


# -- 7 --------------------------------------------------------------------------------

def test_criterion_07_pipeline():
    t0 = time.perf_counter()
    res = small_modulus_pipeline("square", (F(0), F(0)), 1, 3.0, 0.5, budget=10 ** 6)
    secs = time.perf_counter() - t0
    check(7, res.l is not None and res.bound <= 0.5 and secs < 600,
          f"l = {res.l}, verified bound {res.bound:.4g} via {res.route}, {secs:.1f}s")


# -- 8 --------------------------------------------------------------------------------

def test_criterion_08_exponent_transfer():
    rng = np.random.default_rng(8)
    bad, n = [], 0
    for i in range(30):
        cs = random_constraints(rng, int(rng.integers(3, 11)), int(rng.integers(1, 12)))
        p = [1.5, 2.0, 3.0][i % 3]
        eps = [0.1, 0.5, 1.0, 2.0][i % 4]
        res = solve_modulus(cs, p, rel_tol=1e-9)
        t = exponent_transfer(res, eps, cs)
        n += 1
        if not t["direct"] <= t["bound"] + 1e-7:
            bad.append(i)
    check(8, not bad, f"{n} instances, failing {bad}")


# -- 9 --------------------------------------------------------------------------------

def test_criterion_09_dimension_brackets():
    t0 = time.perf_counter()
    sq = estimate_dimension(SQUARE, ks=(1, 2), m_max=4, width=0.5)
    sq_secs = time.perf_counter() - t0
    sq_ok = sq.q_low <= 2.0 <= sq.q_high and sq.width <= 0.5 and sq_secs < 900
    ca = estimate_dimension(CARPET, ks=(1,), m_max=3, width=0.02, min_gap=0.01, max_probes=14)
    ca_ok = 1.0 <= ca.q_low and ca.q_high <= 1.8928 + 0.01
    check(9, sq_ok and ca_ok,
          f"square [{sq.q_low:.4g}, {sq.q_high:.4g}] in {sq_secs:.0f}s; carpet [{ca.q_low:.4g}, {ca.q_high:.4g}]")


# -- 10 -------------------------------------------------------------------------------

def test_criterion_10_snowflake():
    thetas = [F(1, 2), F(4, 5), F(1)]
    bad, n = [], 0
    for i, (fam, params, delta, eps) in enumerate(content_instances()):
        sb = content_admissible(fam, Ball(HALF, 1), 1, delta, params, eps=eps)
        theta = thetas[i % 3]
        rep = snowflake_invariance(sb, theta)
        n += 1
        ok = rep["energy_equal"] and rep["verified"] and rep["pullback_ok"] \
            and rep["tau_prime"] == max(4.0, (2 * float(params.tau)) ** float(theta)) \
            and rep["tau_prime"] == snowflake_tau(params.tau, theta)
        if not ok:
            bad.append(i)
    check(10, not bad, f"{n} instances, failing {bad}")


# -- 11 -------------------------------------------------------------------------------

CLI_RUNS = [
    ["generate", "--levels", "1,2"],
    ["graph", "--level", "2"],
    ["modulus", "--level", "3"],
    ["strongmod", "--p", "2"],
    ["pushdown", "--ifs", "segment", "--p", "3", "--center", "0,0", "--max-level", "5"],
    ["dimension", "--ifs", "segment", "--ks", "2", "--mmax", "2"],
    ["clp", "--levels", "2,3"],
    ["verify"],
]


def test_criterion_11_determinism_and_persistence(tmp_path, capsys):
    cache = tmp_path / "cache"
    differ = []
    for args in CLI_RUNS:
        outs = []
        for _ in range(2):
            cli.main(args + ["--seed", "11", "--cache-dir", str(cache)])
            outs.append(capsys.readouterr().out)
        if outs[0] != outs[1] or not json.loads(outs[0])["command"]:
            differ.append(args[0])
    st = ArtifactStore(cache)
    payload = {"value": 0.1 + 0.2, "tiny": 5e-324, "big": 1.7976931348623157e308, "list": [1 / 3, -0.0]}
    st.put("result|round-trip", payload)
    back = st.get("result|round-trip")
    floats_exact = all(np.float64(a).tobytes() == np.float64(b).tobytes()
                       for a, b in zip([payload["value"], payload["tiny"], payload["big"]] + payload["list"],
                                       [back["value"], back["tiny"], back["big"]] + back["list"]))
    c = net_cover(CARPET, 3)
    text = cover_to_text(c, CARPET, 3, 1)
    cover_exact = cover_from_text(text, CARPET).balls == c.balls
    cached_file = st.get_cover(SQUARE, 2)
    cover_file_exact = cached_file is not None and cached_file.balls == net_cover(SQUARE, 2).balls
    check(11, not differ and floats_exact and cover_exact and cover_file_exact,
          f"{len(CLI_RUNS)} subcommands, differing {differ}; float round trip {floats_exact}; "
          f"cover round trip {cover_exact and cover_file_exact}")
