import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, strategies as st

from confmod.fractals import SQUARE, net_cover
from confmod.geometry import Ball
from confmod.incidence import ConstraintSet, enumerate_chains, kl_problem
from confmod.modulus import (INFEASIBLE, OPTIMAL, TRIVIAL, brute_force_modulus, check_laws, exponent_transfer,
                             random_constraints, solve_modulus)


def disjoint_chains(n, length):
    return ConstraintSet(n * length, tuple(tuple(range(i * length, (i + 1) * length)) for i in range(n)))


def test_single_constraint():
    r = solve_modulus(ConstraintSet(1, ((0,),)), 2)
    assert r.value == pytest.approx(1.0, rel=1e-9) and r.status == OPTIMAL
    assert r.optimal_density.weights[0] == pytest.approx(1.0)


def test_three_chains_of_four():
    assert solve_modulus(disjoint_chains(3, 4), 2).value == pytest.approx(0.75, rel=1e-6)
    assert brute_force_modulus(disjoint_chains(3, 4), 2) == pytest.approx(0.75, abs=1e-8)


def test_single_chain_of_five():
    assert solve_modulus(disjoint_chains(1, 5), 2).value == pytest.approx(0.2, rel=1e-6)


def test_empty_constraint_is_infinite():
    r = solve_modulus(ConstraintSet(2, ((0,), ())), 2)
    assert math.isinf(r.value) and r.status == INFEASIBLE


def test_no_path_is_trivial_zero():
    c = net_cover(SQUARE, 2)
    r = solve_modulus(kl_problem(c, Ball((F(1, 2), F(1, 2)), F(1, 4)), 8), 2)
    assert r.value == 0 and r.status == TRIVIAL


def test_nested_constraints_oracle():
    assert brute_force_modulus(ConstraintSet(2, ((0,), (0, 1))), 2) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("p", [0.5, 1.0, 8.5])
def test_exponent_range(p):
    with pytest.raises(ValueError):
        solve_modulus(ConstraintSet(1, ((0,),)), p)


@given(st.integers(1, 4), st.integers(2, 6), st.sampled_from([1.5, 2.0, 3.0]))
def test_closed_form_disjoint_chains(n, length, p):
    r = solve_modulus(disjoint_chains(n, length), p)
    assert abs(r.value - n * length ** (1 - p)) <= 1e-6 * n * length ** (1 - p)


@given(st.integers(0, 10 ** 6), st.sampled_from([1.5, 2.0, 3.0]))
def test_optimal_density_is_admissible(seed, p):
    rng = np.random.default_rng(seed)
    cs = random_constraints(rng, int(rng.integers(2, 10)), int(rng.integers(1, 12)))
    r = solve_modulus(cs, p)
    w = r.optimal_density.weights
    assert np.all(w >= 0)
    assert min(w[list(P)].sum() for P in cs.subsets) >= 1 - 1e-9
    assert r.value == pytest.approx(float(np.sum(w ** p)), rel=1e-9)
    assert r.bracket[0] <= r.value * (1 + 1e-12)


@given(st.integers(0, 10 ** 6))
def test_adding_constraints_never_decreases(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    a = random_constraints(rng, n, int(rng.integers(1, 6)))
    b = a.union(random_constraints(rng, n, int(rng.integers(1, 6))))
    assert solve_modulus(a, 2).bracket[0] <= solve_modulus(b, 2).bracket[1] + 1e-7


def test_equal_families_agree():
    cs = random_constraints(np.random.default_rng(3), 8, 6)
    assert solve_modulus(cs, 2).value == pytest.approx(solve_modulus(ConstraintSet(8, cs.subsets), 2).value, abs=1e-7)


def test_law_report_small():
    rep = check_laws(seed=1, instances=10)
    assert rep["passed"], rep["failures"]


def test_exponent_transfer_spec_arithmetic():
    assert 0.5 ** 0.5 * 1.2 == pytest.approx(0.8485, abs=1e-4)


def test_exponent_transfer_cases():
    cs = disjoint_chains(2, 3)
    r = solve_modulus(cs, 2)
    t0 = exponent_transfer(r, 0.0)
    assert t0["bound"] == r.value
    t = exponent_transfer(r, 0.5, cs)
    assert t["holds"]
    ones = solve_modulus(ConstraintSet(2, ((0,), (1,))), 2)
    for eps in (0.1, 1.0, 3.0):
        assert exponent_transfer(ones, eps)["bound"] == pytest.approx(ones.value)


def test_flow_and_path_routes_agree():
    c = net_cover(SQUARE, 3)
    prob = kl_problem(c, Ball((F(1, 2), F(1, 2)), F(1, 8)), 2)
    a = solve_modulus(prob, 2, method="paths", rel_tol=1e-6)
    b = solve_modulus(prob, 2, method="flow", rel_tol=1e-6)
    assert a.value == pytest.approx(b.value, rel=1e-5)


def test_chain_enumeration_matches_lazy_solve():
    c = net_cover(SQUARE, 2)
    prob = kl_problem(c, Ball((F(1, 2), F(1, 2)), F(1, 8)), 2)
    full = enumerate_chains(prob)
    assert solve_modulus(full, 2).value == pytest.approx(solve_modulus(prob, 2).value, rel=1e-6)
