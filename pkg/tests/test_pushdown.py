import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, strategies as st

from confmod.fractals import SQUARE
from confmod.geometry import Ball, PolyCurve
from confmod.incidence import CurveFamilySpec
from confmod.pushdown import (CertificateFactory, CertificateUnavailable, EqualizeParams, HypothesisError,
                              WeightedCollection, check_ring_geometry, equalize, make_certificate, replace,
                              ring_design, rounds_needed)

HALF = (F(1, 2), F(1, 2))
R = F(1, 64)


def vertical(c, half=F(1, 8)):
    return PolyCurve(((c[0], c[1] - half), (c[0], c[1] + half)))


@pytest.fixture(scope="module")
def square_factory():
    return CertificateFactory("square", 4, 8.0, 0.25)


@pytest.mark.parametrize("M,eps0,eps,expected", [
    (8, 1, 0.5, 4),
    (0.5, 1, 0.5, 1),
    (1, 1, 0.5, 1),
    (9, 1, 0.5, 5),
    (16, 1, 0.25, 3),
    (100, 0.1, 0.9, math.ceil(math.log2(1000) / math.log2(1 / 0.9)) + 1),
])
def test_rounds_needed_values(M, eps0, eps, expected):
    assert rounds_needed(M, eps0, eps) == expected


@given(st.floats(0.01, 1e6), st.floats(0.01, 10), st.floats(0.01, 0.99))
def test_rounds_needed_is_least_sufficient(M, eps0, eps):
    n = rounds_needed(M, eps0, eps)
    # n - 1 weight rounds of factor eps bring M below eps0, n - 2 do not
    assert n >= 1
    q = math.log2(max(M / eps0, 1)) / math.log2(1 / eps)
    assert n - 1 >= q - 1e-9
    assert n - 2 < q + 1e-9


def test_rounds_needed_rejects_bad_eps():
    with pytest.raises(ValueError):
        rounds_needed(4, 1, 1.0)


@pytest.mark.parametrize("rings", [1, 2, 5])
def test_ring_geometry_clean(rings):
    d = ring_design(SQUARE, HALF, R, 4, 3.0, rings)
    assert check_ring_geometry(d) == []
    assert d.size == sum(d.counts)
    assert d.energy == pytest.approx(float(np.sum(np.array(d.counts) * d.weights ** 3)))


def test_ring_energy_falls_with_more_rings_for_large_p():
    e = [ring_design(SQUARE, HALF, R, 4, 4.0, k).energy for k in (1, 2, 4, 8)]
    assert all(b < a for a, b in zip(e, e[1:]))


def test_certificate_unavailable_at_p_two():
    with pytest.raises(CertificateUnavailable) as info:
        make_certificate("square", HALF, R, 4, 2.0, 0.5, budget=50_000)
    assert info.value.energy > 0.5


def test_segment_certificate_invariants():
    cert = make_certificate("segment", (F(1, 2), F(0)), F(1, 64), 4, 3.0, 0.5)
    assert cert.verified
    assert cert.check_invariants() == []
    assert cert.energy <= 0.5
    assert cert.delta_minus < cert.delta_plus < F(1, 4)


def test_certificate_radius_range():
    with pytest.raises(ValueError):
        make_certificate("square", HALF, F(1, 4), 4, 3.0)
    with pytest.raises(ValueError):
        make_certificate("square", HALF, R, 3, 3.0)


def three_ball_collection(weights=(1.0, 1.0, 1.0)):
    cs = [(F(1, 4), F(1, 2)), (F(1, 2), F(1, 2)), (F(3, 4), F(1, 2))]
    fam = CurveFamilySpec(tuple(vertical(c) for c in cs), F(1, 4))
    return WeightedCollection([Ball(c, R) for c in cs], np.array(weights), fam, 4, 8.0)


def test_replace_all_three(square_factory):
    w = three_ball_collection()
    out, rep = replace(w, [0, 1, 2], square_factory, 0.25)
    assert rep.energy_after <= rep.bound * (1 + 1e-9)
    assert rep.energy_after == pytest.approx(out.energy)
    assert out.audit() == []
    assert out.max_radius <= R / 4


def test_replace_subset_keeps_other_weights(square_factory):
    w = three_ball_collection((1.0, 1.1, 1.3))
    out, rep = replace(w, [1], square_factory, 0.25)
    assert rep.kept == 2
    for i in (0, 2):
        j = out.balls.index(w.balls[i])
        assert out.rho[j] == w.rho[i]
    assert rep.energy_after <= rep.bound * (1 + 1e-9)


def test_replace_empty_choice_is_identity(square_factory):
    w = three_ball_collection()
    out, rep = replace(w, [], square_factory, 0.25)
    assert out.balls == w.balls and np.array_equal(out.rho, w.rho)
    assert rep.energy_after == rep.energy_before


def test_replace_shared_child(square_factory):
    cs = [HALF, (F(1, 2) + F(3, 64), F(1, 2))]
    balls = [Ball(c, R) for c in cs]
    fam = CurveFamilySpec((PolyCurve(((F(1, 4), F(1, 2)), (F(3, 4), F(1, 2)))),), F(1, 2))
    w = WeightedCollection(balls, np.array([1.0, 0.8]), fam, 4, 8.0)
    a, b = square_factory(balls[0]), square_factory(balls[1])
    mid = Ball((F(1, 2) + F(3, 128), F(1, 2) + F(1, 64)), a.collection[0].radius)
    a2, b2 = a.with_extra(mid, 0.3), b.with_extra(mid, 0.4)
    assert a2.check_invariants() == [] and b2.check_invariants() == []
    out, rep = replace(w, [0, 1], {0: a2, 1: b2}, 0.25)
    assert rep.shared >= 1
    # a shared ball takes the larger of its two parent products
    j = out.balls.index(mid)
    assert out.rho[j] == pytest.approx(max(1.0 * 0.3, 0.8 * 0.4))
    assert rep.energy_after <= rep.bound * (1 + 1e-9)
    assert out.audit() == []


def test_replace_rejects_eta_outside_unit_interval(square_factory):
    with pytest.raises(HypothesisError):
        replace(three_ball_collection(), [0], square_factory, 1.5)


def test_replace_rejects_foreign_certificate(square_factory):
    w = three_ball_collection()
    other = square_factory(w.balls[1])
    with pytest.raises(HypothesisError) as info:
        replace(w, [0], {0: other}, 0.25)
    assert info.value.clause == "certificate parent"


def test_replace_rejects_short_curves(square_factory):
    w = three_ball_collection()
    fam = CurveFamilySpec(w.family.curves, F(1, 100))
    w2 = WeightedCollection(w.balls, w.rho, fam, 4, 8.0)
    with pytest.raises(HypothesisError):
        replace(w2, [0], square_factory, 0.25)


def test_equalize_segment_single_ball():
    ball = Ball((F(1, 2), F(0)), F(1, 256))
    fam = CurveFamilySpec((PolyCurve(((F(1, 4), F(0)), (F(3, 4), F(0)))),), F(1, 2))
    w = WeightedCollection([ball], np.ones(1), fam, 4, 3.0)
    fac = CertificateFactory("segment", 4, 3.0, 0.5)
    prm = EqualizeParams.for_collection(w, 1.0, 8.0, fac)
    assert prm.N == 4
    res = equalize(w, prm, fac)
    assert res.weight_rounds == 4
    assert res.window_ok()
    assert res.energy <= 1.0


def test_equalize_requires_energy_below_M():
    ball = Ball((F(1, 2), F(0)), F(1, 256))
    fam = CurveFamilySpec((PolyCurve(((F(1, 4), F(0)), (F(3, 4), F(0)))),), F(1, 2))
    w = WeightedCollection([ball], np.full(1, 3.0), fam, 4, 3.0)
    fac = CertificateFactory("segment", 4, 3.0, 0.5)
    prm = EqualizeParams(1.0, 8.0, 0.5, F(1, 100), F(1, 10), F(1, 10 ** 12))
    with pytest.raises(HypothesisError):
        equalize(w, prm, fac)
