from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, strategies as st

from confmod.fractals import CARPET, SQUARE, cover_from_balls, net_cover
from confmod.geometry import Ball, segment
from confmod.incidence import CurveFamilySpec, annulus_family, traces_constraints
from confmod.modulus import Density, solve_modulus
from confmod.strong import (StrongParams, bridge_lower, clp_bridge_lower, content_admissible, inflations_disjoint,
                            max_weight_packing, recheck_witnesses, snowflake_invariance, snowflake_tau,
                            strong_upper_bound, verify_strong_admissibility)

HALF = (F(1, 2), F(1, 2))


def test_tau_below_four_rejected():
    with pytest.raises(ValueError):
        StrongParams(3, 2)


def test_unit_density_singleton_witness():
    c = cover_from_balls([Ball((F(1, 2), F(1, 2)), F(1, 10))])
    fam = CurveFamilySpec((segment((0, F(1, 2)), (1, F(1, 2))),))
    ver = verify_strong_admissibility(Density(np.ones(1)), c, fam, StrongParams(4, 2))
    assert ver.admissible and ver.verdicts[0].witness == (0,)


def test_three_separated_balls_pack():
    balls = [Ball((F(x, 10), F(1, 2)), F(1, 100)) for x in (1, 5, 9)]
    c = cover_from_balls(balls)
    fam = CurveFamilySpec((segment((0, F(1, 2)), (1, F(1, 2))),))
    ver = verify_strong_admissibility(Density(np.full(3, 0.4)), c, fam, StrongParams(4, 2))
    assert ver.admissible and ver.verdicts[0].weight == pytest.approx(1.2)


def test_clique_of_inflations_fails_exactly():
    balls = [Ball((F(x, 100), F(1, 2)), F(1, 20)) for x in (40, 50, 60)]
    c = cover_from_balls(balls)
    fam = CurveFamilySpec((segment((0, F(1, 2)), (1, F(1, 2))),))
    ver = verify_strong_admissibility(Density(np.full(3, 0.4)), c, fam, StrongParams(4, 2))
    v = ver.verdicts[0]
    assert not v.admissible and v.weight == pytest.approx(0.4) and v.method == "exact"


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=9), st.integers(0, 2 ** 30))
def test_packing_matches_enumeration(weights, seed):
    n = len(weights)
    rng = np.random.default_rng(seed)
    adj = np.triu(rng.random((n, n)) < 0.4, 1)
    adj = adj | adj.T
    conf = [sum(1 << j for j in range(n) if adj[i, j]) for i in range(n)]
    best = 0.0
    for mask in range(1 << n):
        members = [i for i in range(n) if mask >> i & 1]
        if all(not adj[a, b] for a in members for b in members if a < b):
            best = max(best, sum(weights[i] for i in members))
    w, mem, complete = max_weight_packing(weights, conf)
    assert complete and w == pytest.approx(best)
    assert all(not adj[a, b] for a in mem for b in mem if a < b)


def test_content_formula_example():
    balls = [Ball((F(2 * i + 1, 20), F(1, 2)), F(1, 20)) for i in range(10)]
    diams = np.array([float(b.diameter()) for b in balls])
    rho = 10 * 4 * diams / 1
    assert np.allclose(rho, 4.0) and float(np.sum(rho ** 2)) == pytest.approx(160.0)


def test_content_admissible_unit_segments():
    fam = CurveFamilySpec(tuple(segment((0, F(k, 4)), (1, F(k, 4))) for k in range(1, 4)), 1)
    sb = content_admissible(fam, Ball(HALF, 1), 1, F(1, 8), StrongParams(4, 2))
    assert sb.upper_value <= sb.theoretical_bound
    # energy (10 tau/r)^p sum diam^p against (20 tau)^p sum diam^p / r^p
    assert sb.upper_value == pytest.approx(sb.theoretical_bound / 4, rel=1e-9)
    assert not recheck_witnesses(sb.density, sb.collection, fam, sb.verification())


def test_content_admissible_preconditions():
    fam = CurveFamilySpec((segment((0, 0), (F(1, 10), 0)),), F(1, 10))
    with pytest.raises(ValueError):
        content_admissible(fam, Ball(HALF, F(1, 100)), F(1, 10), F(1, 8), StrongParams(4, 2))
    with pytest.raises(ValueError):
        content_admissible(fam, Ball(HALF, 1), F(1, 2), F(1, 8), StrongParams(4, 2))


def test_strong_density_dominates_plain_modulus():
    c = net_cover(SQUARE, 3)
    fam = annulus_family(HALF, F(1, 8), F(3, 8), 8)
    sb = strong_upper_bound(c, fam, StrongParams(4, 2))
    plain = solve_modulus(traces_constraints(fam, c), 2).value
    assert plain <= sb.upper_value + 1e-9


def test_strong_admissibility_monotone_in_density():
    c = net_cover(SQUARE, 3)
    fam = annulus_family(HALF, F(1, 8), F(3, 8), 8)
    sb = strong_upper_bound(c, fam, StrongParams(4, 2))
    rng = np.random.default_rng(0)
    bigger = Density(sb.density.weights * (1 + rng.random(len(c))))
    assert verify_strong_admissibility(bigger, c, fam, StrongParams(4, 2)).admissible


def test_bridge_same_cover():
    c = net_cover(SQUARE, 3)
    fam = annulus_family(HALF, F(1, 8), F(3, 8), 8)
    rep = bridge_lower(c, c, fam, 2)
    assert rep["holds"] and rep["composite_admissible"]
    assert bridge_lower(c, c, CurveFamilySpec(()), 2)["fine_modulus"] == 0.0


def test_bridge_window_violation():
    c = net_cover(SQUARE, 3)
    with pytest.raises(ValueError):
        bridge_lower(c, net_cover(SQUARE, 1), annulus_family(HALF, F(1, 8), F(3, 8), 4), 2)


def test_clp_bridge_rejects_short_curves():
    fine = net_cover(CARPET, 4)
    v = net_cover(CARPET, 2)
    # radial curves of the central annulus are shorter than 2 tau * 1/9
    with pytest.raises(ValueError):
        clp_bridge_lower(fine, v, annulus_family(HALF, F(1, 6), F(1, 2), 8), 2)


def test_clp_bridge_carpet_lines():
    fine = net_cover(CARPET, 3)
    v = net_cover(CARPET, 2)
    lines = [segment((0, F(k, 3)), (1, F(k, 3))) for k in range(4)]
    lines += [segment((F(k, 3), 0), (F(k, 3), 1)) for k in range(4)]
    rep = clp_bridge_lower(fine, v, CurveFamilySpec(tuple(lines), 1), 2)
    assert rep["admissible"] and rep["holds"]


def test_clp_bridge_single_ball_reduces_to_one_annulus():
    fine = net_cover(SQUARE, 6)
    v = cover_from_balls([Ball(HALF, F(1, 32))], kappa=1)
    fam = annulus_family(HALF, F(1, 64), F(7, 16), 4)
    rep = clp_bridge_lower(fine, v, fam, 2)
    assert rep["admissible"] and rep["holds"]
    assert len(rep["annulus_moduli"]) == 1


def test_snowflake_tau_formula():
    assert snowflake_tau(4, F(1, 2)) == 4.0
    assert snowflake_tau(16, F(1, 2)) == pytest.approx(32 ** 0.5)
    assert snowflake_tau(4, 1) == 8.0


@pytest.mark.parametrize("theta", [F(1, 2), F(4, 5), F(1)])
def test_snowflake_energy_identical(theta):
    fam = CurveFamilySpec(tuple(segment((0, F(k, 4)), (1, F(k, 4))) for k in range(1, 4)), 1)
    sb = content_admissible(fam, Ball(HALF, 1), 1, F(1, 4), StrongParams(4, 2))
    rep = snowflake_invariance(sb, theta)
    assert rep["energy_equal"]
    assert rep["verified"] and rep["pullback_ok"]


def test_inflation_disjointness_is_symmetric():
    a, b = Ball((0, 0), F(1, 10)), Ball((1, 0), F(1, 10))
    assert inflations_disjoint(a, b, 4) and inflations_disjoint(b, a, 4)
    assert not inflations_disjoint(a, b, 6)


def test_local_annulus_problem_matches_full_cover():
    from confmod.fractals import subcover_in_ball
    from confmod.incidence import kl_problem
    fine = net_cover(CARPET, 3)
    V = Ball((F(1, 6), F(1, 6)), F(1, 9))
    full = solve_modulus(kl_problem(fine, V, 3), 2).value
    local = subcover_in_ball(fine, Ball(V.center, 3 * V.radius + 2 * fine.balls[0].radius))
    assert len(local.balls) < len(fine.balls)
    assert solve_modulus(kl_problem(local, V, 3), 2).value == pytest.approx(full, rel=1e-6)
