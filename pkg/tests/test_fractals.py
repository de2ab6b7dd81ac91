import math
from fractions import Fraction as F

import pytest
from hypothesis import given, strategies as st

from confmod.fractals import (BUILTIN, CARPET, SEGMENT, SPONGE, SQUARE, BudgetExceeded, IfsSystem, cell_corners,
                              generate_cells, net_cover, parse_ifs, resolve_ifs, subcover_in_ball,
                              verify_approximation)
from confmod.geometry import Ball, balls_intersect


@pytest.mark.parametrize("ifs,k,count", [(CARPET, 1, 8), (CARPET, 3, 512), (SQUARE, 0, 1), (SPONGE, 1, 20)])
def test_cell_counts(ifs, k, count):
    cells = generate_cells(ifs, k)
    assert len(cells) == count
    assert all(c.side == F(1, ifs.base ** k) for c in cells)


def test_cells_are_lexicographic_and_inside_unit_cube():
    cells = generate_cells(CARPET, 2)
    corners = [c.corner for c in cells]
    assert corners == sorted(corners)
    assert all(0 <= lo and hi <= 1 for c in cells for lo, hi in c.box)
    assert F(1, 2) not in {c.center[0] for c in cells if c.center[1] == F(1, 2)}


def test_cell_budget():
    with pytest.raises(BudgetExceeded):
        cell_corners(CARPET, 5, budget=1000)


def test_net_cover_examples():
    c = net_cover(CARPET, 2)
    assert len(c) == 64 and {b.radius for b in c.balls} == {F(1, 9)}
    s = net_cover(SQUARE, 1)
    assert len(s) == 4 and s.level_r == F(1, 2)
    assert s.kappa == 2 and s.covers_space
    assert set(s.lb_table.values()) == {4}


def test_inflated_carpet_level1_pairwise_overlapping():
    c = net_cover(CARPET, 1, 2)
    assert {b.radius for b in c.balls} == {F(2, 3)}
    assert all(balls_intersect(a, b) for i, a in enumerate(c.balls) for b in c.balls[i + 1:])


def test_inflation_below_one_rejected():
    with pytest.raises(ValueError):
        net_cover(SQUARE, 1, F(1, 2))


@pytest.mark.parametrize("ifs", [SQUARE, CARPET, SEGMENT])
@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("lam", [1, 2])
def test_net_covers_verify(ifs, k, lam):
    rep = verify_approximation(net_cover(ifs, k, lam))
    assert rep.passed, rep.to_dict()


def test_deleted_ball_breaks_coverage():
    c = net_cover(CARPET, 2)
    broken = c.with_balls(c.balls[1:])
    rep = verify_approximation(broken)
    assert rep.checks["coverage"].passed is False
    assert rep.checks["coverage"].counterexample is not None


def test_duplicate_ball_breaks_core_disjointness():
    c = net_cover(CARPET, 2)
    rep = verify_approximation(c.with_balls(c.balls + (c.balls[0],)))
    assert rep.checks["core_disjointness"].passed is False


def test_subcover_examples():
    c = net_cover(CARPET, 2)
    sub = subcover_in_ball(c, Ball((F(1, 2), F(1, 2)), F(1, 9)), "intersects")
    assert 0 < len(sub) < len(c)
    assert subcover_in_ball(c, Ball((F(1, 2), F(1, 2)), 2)) is c
    hole = subcover_in_ball(c, Ball((F(1, 2), F(1, 2)), F(1, 20)), "contained")
    assert hole.empty


def test_moran_exponent():
    assert CARPET.similarity_dimension() == pytest.approx(math.log(8) / math.log(3))
    s = CARPET.similarity_dimension()
    assert CARPET.n_kept * (1 / 3) ** s == pytest.approx(1.0)


def test_ifs_text_round_trip_and_resolution():
    for ifs in BUILTIN.values():
        assert parse_ifs(ifs.to_text()) == ifs
    assert resolve_ifs("carpet.ifs") is CARPET


def test_ifs_validation():
    with pytest.raises(ValueError):
        IfsSystem(3, ((0, 0), (2, 2)), 2)  # not face-connected
    with pytest.raises(ValueError):
        IfsSystem(2, ((0, 2),), 2)
    with pytest.raises(ValueError):
        parse_ifs("base = 2\ndimension = 2\n")


@given(st.integers(min_value=0, max_value=3))
def test_cell_count_is_power(k):
    assert len(cell_corners(CARPET, k)) == 8 ** k


def test_net_cover_is_deterministic():
    a, b = net_cover(CARPET, 3), net_cover(CARPET, 3)
    assert a.balls == b.balls
