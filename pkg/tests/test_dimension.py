import json
import math
from fractions import Fraction as F

import pytest

from confmod import cli
from confmod.dimension import (DECAYING, FLAT, INCONCLUSIVE, DecayTable, center_orbits, clp_diagnostics,
                               decay_table, estimate_dimension, hausdorff_lower_harness, symmetry_group)
from confmod.fractals import CARPET, SEGMENT, SQUARE, cell_count, net_cover
from confmod.geometry import Ball, PolyCurve
from confmod.incidence import kl_problem
from confmod.modulus import solve_modulus
from confmod.store import ArtifactStore, CacheCorrupted, cover_from_text, cover_to_text


@pytest.mark.parametrize("ifs,size", [(SQUARE, 8), (CARPET, 8), (SEGMENT, 2)])
def test_symmetry_group_size(ifs, size):
    assert len(symmetry_group(ifs)) == size


@pytest.mark.parametrize("ifs,k", [(SQUARE, 2), (CARPET, 2), (SEGMENT, 3)])
def test_orbits_partition_the_cells(ifs, k):
    orbits = center_orbits(ifs, k)
    assert sum(n for _, n in orbits) == cell_count(ifs, k)
    assert len(center_orbits(ifs, k, reduce=False)) == cell_count(ifs, k)


def test_carpet_level_one_has_two_orbits():
    # corner cells and edge-midpoint cells
    assert sorted(n for _, n in center_orbits(CARPET, 1)) == [4, 4]


def test_decay_row_matches_direct_solve():
    tab = decay_table(SQUARE, 2.0, ks=(1,), m_max=1, symmetric=False)
    direct = 0.0
    for z, _ in center_orbits(SQUARE, 1, reduce=False):
        res = solve_modulus(kl_problem(net_cover(SQUARE, 2), Ball(z, F(1, 2)), 2), 2.0, rel_tol=1e-3)
        direct = max(direct, res.value)
    assert tab.values[1] == pytest.approx(direct, rel=1e-12)


def test_symmetry_reduction_keeps_the_maximum():
    full = decay_table(CARPET, 2.0, ks=(1,), m_max=1, symmetric=False)
    red = decay_table(CARPET, 2.0, ks=(1,), m_max=1)
    assert red.values == pytest.approx(full.values, rel=1e-3)


def synthetic(values):
    return DecayTable(2.0, (1,), len(values) - 1, values, {1: values}, [(1, (F(1, 2),))] * len(values),
                      ["optimal"] * len(values))


def test_classification():
    assert synthetic([1, 1, 0.5, 0.25]).classify() == DECAYING
    assert synthetic([1, 1, 2, 4]).classify() == FLAT
    assert synthetic([1, 1, 1.01, 1.0]).classify() == INCONCLUSIVE
    # the m = 0 row does not take part in the slope
    assert synthetic([100, 1, 0.5, 0.25]).slope() == pytest.approx(math.log(0.5))


def test_segment_bracket_contains_one():
    # at k = 1 the doubled ball already covers the whole segment
    est = estimate_dimension(SEGMENT, qmin=1.5, qmax=3.0, ks=(2,), m_max=3)
    assert est.q_low <= 1.0 <= est.q_high
    assert est.status[1.5] == DECAYING


def test_square_exponent_two_is_not_decaying_at_p_above():
    tab = decay_table(SQUARE, 1.5, ks=(1,), m_max=3)
    assert tab.classify() == FLAT


def test_touching_condensers_are_flagged():
    E = PolyCurve(((F(1, 4), F(1, 4)), (F(1, 4), F(3, 4))))
    Fc = PolyCurve(((F(1, 4), F(1, 2)), (F(3, 4), F(1, 2))))
    prof = clp_diagnostics(SQUARE, 2.0, levels=(2, 3), condensers=[(E, Fc)], separations=())
    assert any("touch" in f for f in prof.flags)


def test_square_psi_decreases_with_separation():
    prof = clp_diagnostics(SQUARE, 2.0, levels=(3,), gaps=(F(1, 2),))
    vals = [r["value"] for r in sorted(prof.psi_rows, key=lambda r: -F(r["separation"]))]
    assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
    assert not any("psi increased" in f for f in prof.flags)


def test_harness_rejects_large_radius():
    with pytest.raises(ValueError):
        hausdorff_lower_harness(SQUARE, 2.0, (F(1, 2), F(1, 2)), F(1, 5))


def test_harness_rejects_continua_outside_the_cube():
    with pytest.raises(ValueError):
        hausdorff_lower_harness(SQUARE, 2.0, (F(7, 8), F(1, 2)), F(1, 16))


def test_harness_square_gives_positive_constant():
    rep = hausdorff_lower_harness(SQUARE, 2.0, (F(3, 8), F(1, 2)), F(1, 8))
    assert rep["failed_step"] is None
    A = rep["steps"]["A"]
    assert A["good_modulus"] >= A["phi"] / 2
    assert rep["steps"]["B"]["strong_energy"] <= rep["steps"]["B"]["covering_bound"]
    assert rep["steps"]["C"]["holds"]
    assert rep["implied_constant"] > 0


# -- store ---------------------------------------------------------------------------

def test_store_round_trip(tmp_path):
    st = ArtifactStore(tmp_path)
    payload = {"value": 0.1 + 0.2, "status": "optimal", "rows": [1, 2, 3]}
    st.put("decay|abc|2.0", payload)
    assert st.get("decay|abc|2.0") == payload
    assert st.get("decay|abc|2.5") is None
    assert st.path_for("decay|abc|2.0").parent.name == "decay"


def test_store_detects_tampering(tmp_path):
    st = ArtifactStore(tmp_path)
    path = st.put("decay|abc|2.0", {"value": 1.5, "status": "optimal"})
    path.write_text(path.read_text().replace("1.5", "1.25"))
    with pytest.raises(CacheCorrupted) as info:
        st.get("decay|abc|2.0")
    assert info.value.invariant == "checksum"
    bad = [f for f in st.verify() if not f.ok]
    assert bad and bad[0].invariant == "checksum"


def test_cover_text_round_trip_is_exact():
    c = net_cover(CARPET, 2)
    text = cover_to_text(c, CARPET, 2, 1)
    back = cover_from_text(text, CARPET)
    assert back.balls == c.balls
    assert cover_to_text(back, CARPET, 2, 1) == text


def test_cover_text_tampering():
    text = cover_to_text(net_cover(SQUARE, 1), SQUARE, 1, 1)
    lines = text.split("\n")
    lines[-2] = lines[-2].replace("3/4", "5/8", 1)
    with pytest.raises(CacheCorrupted) as info:
        cover_from_text("\n".join(lines), SQUARE)
    assert info.value.invariant == "checksum"
    with pytest.raises(CacheCorrupted) as info:
        cover_from_text(text, CARPET)
    assert info.value.invariant == "ifs-hash"


def test_store_verify_covers(tmp_path):
    st = ArtifactStore(tmp_path)
    st.put_cover(SQUARE, 2)
    found = st.verify([SQUARE])
    assert found and all(f.ok for f in found)


# -- command line --------------------------------------------------------------------

def run_cli(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr().out
    return code, out


def test_cli_modulus_report(tmp_path, capsys):
    code, out = run_cli(["modulus", "--level", "2", "--cache-dir", str(tmp_path)], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["command"] == "modulus" and rep["status"] == "optimal"
    assert rep["tables"]["modulus"][0]["value"] > 0
    assert rep["ifs_hash"] == SQUARE.content_hash


def test_cli_bad_arguments_exit_two(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["modulus", "--level", "two"])
    assert info.value.code == 2


def test_cli_runtime_error_exit_one(tmp_path, capsys):
    code, out = run_cli(["modulus", "--ifs", str(tmp_path / "missing.ifs"), "--no-cache"], capsys)
    assert code == 1
    assert "error" in json.loads(out)


def test_cli_verify_flags_tampered_cache(tmp_path, capsys):
    assert run_cli(["generate", "--levels", "1,2", "--cache-dir", str(tmp_path)], capsys)[0] == 0
    assert run_cli(["verify", "--cache-dir", str(tmp_path)], capsys)[0] == 0
    path = next(tmp_path.rglob("*.cover"))
    path.write_text(path.read_text().replace("1/4", "1/3", 1))
    code, out = run_cli(["verify", "--cache-dir", str(tmp_path)], capsys)
    assert code == 1
    assert json.loads(out)["failing"]


def test_cli_csv_output(tmp_path, capsys):
    csv_path = tmp_path / "m.csv"
    code, _ = run_cli(["modulus", "--no-cache", "--csv", str(csv_path)], capsys)
    assert code == 0
    head, row = csv_path.read_text().splitlines()[:2]
    assert head.startswith("level,p,L")
