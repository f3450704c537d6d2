import json
import math

import numpy as np
import pytest

from cqflow import netmodel as nm
from cqflow.cases import builtin_case_names, builtin_case_path, load_builtin


# ---------------------------------------------------------------------------
# helpers

def small_json_case(**overrides):
    doc = {
        "name": "t3",
        "base_mva": 10.0,
        "phase_count": 1,
        "buses": [
            {"id": 1, "type": "slack", "p_load": 0.0, "q_load": 0.0,
             "v_set": 1.02, "v_max": 1.05, "v_min": 0.95},
            {"id": 2, "type": "PV", "p_load": 0.1, "q_load": 0.02,
             "v_set": 1.0, "v_max": 1.05, "v_min": 0.95},
            {"id": 3, "type": "PQ", "p_load": 0.25, "q_load": 0.08,
             "v_max": 1.05, "v_min": 0.95},
        ],
        "branches": [
            {"from": 1, "to": 2, "r": 0.02, "x": 0.08, "b_charge": 0.01, "s_max": 1.0},
            {"from": 2, "to": 3, "r": 0.03, "x": 0.09, "b_charge": 0.0, "s_max": None},
        ],
        "sources": [
            {"bus": 1, "phases": "a", "p_min": 0.0, "p_max": 2.0,
             "q_min": -1.0, "q_max": 1.0, "c1": 10.0},
            {"bus": 2, "phases": "a", "p_min": 0.0, "p_max": 1.0,
             "q_min": -0.5, "q_max": 0.5, "c1": 15.0, "p_set": 0.2},
        ],
    }
    doc.update(overrides)
    return json.dumps(doc)


def physical_branch_currents(branch, v_from, v_to, pc):
    """Terminal currents of one branch from first-principles circuit laws.

    Model: ideal transformer t:1 on the from side feeding a pi section.
    Work at the internal node behind the transformer and map current
    through the ideal transformer, instead of using precomputed two-port
    admittance blocks.
    """
    z = np.array([[complex(*branch.z[p][g]) for g in range(pc)] for p in range(pc)])
    ys = np.linalg.inv(z)
    t = branch.tap
    v_int = v_from / t
    i_series = ys @ (v_int - v_to)
    i_charge_f = 1j * (branch.b_charge / 2.0) * v_int
    i_charge_t = 1j * (branch.b_charge / 2.0) * v_to
    i_from = (i_series + i_charge_f) / t
    i_to = -i_series + i_charge_t
    return i_from, i_to


def network_currents_oracle(case, adm, v):
    """I = Y v recomputed branch by branch via physical_branch_currents."""
    n, pc = case.n, case.phase_count
    out = np.zeros(n * pc, dtype=complex)
    for br in case.branches:
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        fi = np.arange(pc) * n + i
        ti = np.arange(pc) * n + j
        i_f, i_t = physical_branch_currents(br, v[fi], v[ti], pc)
        out[fi] += i_f
        out[ti] += i_t
    for k, b in enumerate(case.buses):
        for ph in range(pc):
            s = ph * n + k
            out[s] += complex(b.g_shunt, b.b_shunt) * v[s]
    return out


# ---------------------------------------------------------------------------
# MATPOWER parsing

def test_parse_case5_structure():
    case = load_builtin("case5")
    assert case.name == "case5"
    assert case.base_mva == 100.0
    assert case.phase_count == 1
    assert [b.id for b in case.buses] == [1, 2, 3, 4, 5]
    assert len(case.branches) == 6
    assert len(case.sources) == 5

    b2 = case.buses[1]
    assert b2.type == nm.PQ
    assert b2.p_load == (3.0,)
    assert b2.q_load == (0.9861,)
    assert b2.v_max == 1.1 and b2.v_min == 0.9

    assert case.buses[3].type == nm.SLACK
    assert case.slack_index == 3

    br = case.branches[0]
    assert br.z == (((0.00281, 0.0281),),)
    assert br.b_charge == 0.00712
    assert br.s_max == 4.0
    # unrated branch keeps s_max = None
    assert case.branches[1].s_max is None

    g3 = case.sources_at(3)[0]
    assert g3.p_max == 5.2
    assert g3.q_min == -3.9
    assert g3.c1 == 30.0 and g3.c2 == 0.0


def test_parse_case57_and_case118():
    c57 = load_builtin("case57")
    assert c57.n == 57
    assert len(c57.branches) == 80
    taps = [br.tap for br in c57.branches if br.tap != 1.0]
    assert len(taps) == 15
    # synchronous condensers are pinned to zero active output
    for bus in (2, 6, 9):
        (src,) = c57.sources_at(bus)
        assert src.p_min == src.p_max == 0.0

    c118 = load_builtin("case118")
    assert c118.n == 118
    assert len(c118.sources) == 54
    assert len(c118.branches) == 186
    p, _ = c118.load_vectors()
    assert p.sum() == pytest.approx(42.42, abs=1e-9)
    assert sum(1 for br in c118.branches if br.tap != 1.0) == 9


def test_parse_errors_carry_line_numbers():
    text = "mpc.baseMVA = 100;\nmpc.bus = [\n 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n oops;\n];"
    with pytest.raises(nm.CaseSyntaxError) as err:
        nm.parse_matpower_case(text)
    assert err.value.line == 4
    assert "line 4" in str(err.value)


def test_parse_requires_tables():
    with pytest.raises(nm.CaseSyntaxError, match="baseMVA"):
        nm.parse_matpower_case("function mpc = x\n")
    with pytest.raises(nm.CaseSyntaxError, match="mpc.gen"):
        nm.parse_matpower_case("mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n];")


def test_unterminated_table():
    text = "mpc.baseMVA = 100;\nmpc.bus = [\n 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n"
    with pytest.raises(nm.CaseSyntaxError, match="unterminated"):
        nm.parse_matpower_case(text)


CASE3_M = """function mpc = c3
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
 2 1 80 20 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
 1 50 0 90 -90 1.02 100 1 250 0;
 1 0 0 10 -10 1.01 100 0 50 0;
];
mpc.branch = [
 1 2 0.01 0.05 0.02 0 0 0 0 {shift} 1 {amin} {amax};
 1 2 0.02 0.10 0.00 0 0 0 0 0 {status} -360 360;
];
mpc.gencost = [
 2 0 0 3 0.1 20 5;
 2 0 0 2 45 0;
];
"""


def test_out_of_service_rows_dropped_with_warning():
    text = CASE3_M.format(shift=0, status=0, amin=-360, amax=360)
    with pytest.warns(UserWarning, match="out-of-service"):
        case = nm.parse_matpower_case(text)
    assert len(case.branches) == 1
    assert len(case.sources) == 1
    # gencost rows stay aligned with the original gen rows
    assert case.sources[0].c2 == 0.1
    assert case.sources[0].c1 == 20.0
    assert case.sources[0].c0 == 5.0
    assert case.sources[0].p_set == 0.5
    assert case.buses[0].v_set == 1.02


def test_phase_shifter_rejected():
    text = CASE3_M.format(shift=30, status=1, amin=-360, amax=360)
    with pytest.raises(nm.CaseSemanticError, match="[Pp]hase-shift"):
        nm.parse_matpower_case(text)


def test_piecewise_cost_rejected():
    text = CASE3_M.format(shift=0, status=1, amin=-360, amax=360).replace("2 0 0 3 0.1 20 5", "1 0 0 2 0 0 100 2000")
    with pytest.raises(nm.CaseSemanticError, match="polynomial"):
        nm.parse_matpower_case(text)


def test_angle_limit_warning():
    text = CASE3_M.format(shift=0, status=1, amin=-30, amax=30).replace("100 0 50", "100 1 50")
    with pytest.warns(UserWarning, match="angle-difference"):
        nm.parse_matpower_case(text)


# ---------------------------------------------------------------------------
# JSON schema

def test_json_parse_small_case():
    case = nm.parse_json_case(small_json_case())
    assert case.base_mva == 10.0
    assert case.buses[2].v_set == 1.0  # default
    assert case.branches[0].s_max == 1.0
    assert case.branches[1].s_max is None
    assert case.sources[1].p_set == 0.2
    assert case.sources[0].c2 == 0.0


def test_json_round_trip_exact():
    for name in builtin_case_names():
        case = load_builtin(name)
        again = nm.parse_json_case(nm.render_json_case(case))
        assert again == case, name
        assert nm.case_fingerprint(again) == nm.case_fingerprint(case)


def test_fingerprint_tracks_data():
    case = load_builtin("case9")
    fp = nm.case_fingerprint(case)
    assert len(fp) == 16 and int(fp, 16) >= 0
    doc = json.loads(nm.render_json_case(case))
    doc["buses"][3]["p_load"] = doc["buses"][3]["p_load"] + 1e-9
    assert nm.case_fingerprint(nm.parse_json_case(json.dumps(doc))) != fp


def test_json_unknown_key_rejected():
    doc = json.loads(small_json_case())
    doc["branches"][0]["smax"] = 2.0
    del doc["branches"][0]["s_max"]
    with pytest.raises(nm.CaseSyntaxError, match="smax"):
        nm.parse_json_case(json.dumps(doc))


def test_json_missing_required_key():
    doc = json.loads(small_json_case())
    del doc["sources"][0]["p_min"]
    with pytest.raises(nm.CaseSyntaxError, match="p_min"):
        nm.parse_json_case(json.dumps(doc))


def test_json_bad_phases():
    doc = json.loads(small_json_case())
    doc["sources"][0]["phases"] = "ad"
    with pytest.raises(nm.CaseSyntaxError, match="phase"):
        nm.parse_json_case(json.dumps(doc))


def test_json_null_limits_mean_unbounded():
    doc = json.loads(small_json_case())
    doc["sources"][0]["q_min"] = None
    doc["sources"][0]["q_max"] = None
    case = nm.parse_json_case(json.dumps(doc))
    assert case.sources[0].q_min == -math.inf
    assert case.sources[0].q_max == math.inf
    rendered = json.loads(nm.render_json_case(case))
    assert rendered["sources"][0]["q_min"] is None


def test_feeder4_contents():
    case = load_builtin("feeder4")
    assert case.phase_count == 3
    assert case.n == 4
    assert case.buses[0].type == nm.SLACK
    # unbalanced loads
    assert case.buses[1].p_load == (0.10, 0.15, 0.12)
    battery = case.sources_at(3)[0]
    assert battery.pf_min == 0.95
    assert battery.phases == (0, 1, 2)
    z = case.branches[0].z
    assert z[0][1] == z[1][0] != (0.0, 0.0)
    ps, qs = case.source_set_vectors()
    k = case.bus_index(3)
    for ph in range(3):
        assert ps[case.slot(k, ph)] == battery.p_set
    assert qs.sum() == 0.0


# ---------------------------------------------------------------------------
# validation

def mutate_case(**changes):
    doc = json.loads(small_json_case())
    for path, value in changes.items():
        parts = path.split(".")
        node = doc
        for p in parts[:-1]:
            node = node[int(p)] if isinstance(node, list) else node[p]
        leaf = parts[-1]
        if isinstance(node, list):
            node[int(leaf)] = value
        else:
            node[leaf] = value
    return json.dumps(doc)


@pytest.mark.parametrize(
    "changes,match",
    [
        ({"buses.0.id": 2}, "duplicate bus"),
        ({"buses.0.type": "PQ"}, "slack"),
        ({"buses.1.type": "slack"}, "slack"),
        ({"buses.2.type": "hub"}, "unknown type"),
        ({"branches.0.to": 9}, "missing bus"),
        ({"branches.0.to": 1}, "from and to"),
        ({"branches.0.tap": 0.0}, "tap"),
        ({"branches.0.s_max": -1.0}, "s_max"),
        ({"buses.1.v_min": 1.2}, "v_min"),
        ({"sources.0.p_min": 3.0}, "bound"),
        ({"sources.0.pf_min": 1.5}, "pf_min"),
        ({"sources.0.bus": 7}, "missing bus"),
        ({"phase_count": 2}, "phase_count"),
        ({"base_mva": 0}, "base_mva"),
    ],
)
def test_semantic_validation(changes, match):
    with pytest.raises(nm.CaseSemanticError, match=match):
        nm.parse_json_case(mutate_case(**changes))


def test_asymmetric_phase_impedance_rejected():
    case = load_builtin("feeder4")
    doc = json.loads(nm.render_json_case(case))
    doc["branches"][0]["z_phase"][0][1][0] += 0.001
    with pytest.raises(nm.CaseSemanticError, match="symmetric"):
        nm.parse_json_case(json.dumps(doc))


def test_three_phase_tap_rejected():
    case = load_builtin("feeder4")
    doc = json.loads(nm.render_json_case(case))
    doc["branches"][0]["tap"] = 1.05
    with pytest.raises(nm.CaseSemanticError, match="tap"):
        nm.parse_json_case(json.dumps(doc))


# ---------------------------------------------------------------------------
# balanced replication

def test_balanced_three_phase_round_trip():
    case = load_builtin("case9")
    c3 = nm.balanced_three_phase(case)
    assert c3.phase_count == 3
    assert c3.buses[4].p_load == (case.buses[4].p_load[0],) * 3
    assert c3.sources[0].c1 == case.sources[0].c1 / 3.0
    for br3, br1 in zip(c3.branches, case.branches):
        assert br3.z[1][1] == br1.z[0][0]
        assert br3.z[0][2] == (0.0, 0.0)

    back = nm.single_phase_equivalent(c3)
    assert back.phase_count == 1
    assert back.buses == case.buses
    assert back.branches == case.branches
    for sb, s in zip(back.sources, case.sources):
        assert sb.c1 == pytest.approx(s.c1, rel=1e-15)
        assert sb.p_max == s.p_max


def test_single_phase_equivalent_rejects_unbalanced():
    case = load_builtin("feeder4")
    with pytest.raises(nm.CaseSemanticError, match="not balanced"):
        nm.single_phase_equivalent(case)


def test_wrong_direction_conversions_rejected():
    with pytest.raises(nm.CaseSemanticError):
        nm.balanced_three_phase(load_builtin("feeder4"))
    with pytest.raises(nm.CaseSemanticError):
        nm.single_phase_equivalent(load_builtin("case9"))


# ---------------------------------------------------------------------------
# admittance

@pytest.mark.parametrize("name", ["case5", "case9", "case57", "case118", "feeder4"])
def test_admittance_matches_physical_circuit(name):
    """Y v must equal terminal currents computed from circuit laws."""
    case = load_builtin(name)
    adm = nm.build_admittance(case)
    rng = np.random.default_rng(42)
    size = case.n * case.phase_count
    for _ in range(5):
        v = rng.normal(1.0, 0.1, size) + 1j * rng.normal(0.0, 0.1, size)
        want = network_currents_oracle(case, adm, v)
        got = adm.y @ v
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12 * max(1.0, np.abs(want).max()))


def test_admittance_is_symmetric():
    # no phase shifters anywhere in the bundled cases
    for name in builtin_case_names():
        adm = nm.build_admittance(load_builtin(name))
        np.testing.assert_array_equal(adm.y, adm.y.T)


def test_admittance_row_sums_without_taps():
    # with all taps nominal, row sums reduce to shunt + charging terms
    case = load_builtin("case9")
    assert all(br.tap == 1.0 for br in case.branches)
    adm = nm.build_admittance(case)
    got = adm.y.sum(axis=1)
    want = np.zeros(case.n, dtype=complex)
    for br in case.branches:
        want[case.bus_index(br.from_bus)] += 1j * br.b_charge / 2.0
        want[case.bus_index(br.to_bus)] += 1j * br.b_charge / 2.0
    for k, b in enumerate(case.buses):
        want[k] += complex(b.g_shunt, b.b_shunt)
    np.testing.assert_allclose(got, want, atol=1e-13)


def test_balanced_admittance_is_block_diagonal():
    case = load_builtin("case9")
    adm1 = nm.build_admittance(case)
    adm3 = nm.build_admittance(nm.balanced_three_phase(case))
    n = case.n
    for p in range(3):
        for g in range(3):
            block = adm3.y[p * n:(p + 1) * n, g * n:(g + 1) * n]
            if p == g:
                np.testing.assert_array_equal(block, adm1.y)
            else:
                assert np.all(block == 0)


def test_branch_blocks_shapes_and_indices():
    case = load_builtin("feeder4")
    adm = nm.build_admittance(case)
    assert len(adm.branches) == len(case.branches)
    ba = adm.branches[1]
    assert (ba.from_index, ba.to_index) == (1, 2)
    for blk in (ba.yff, ba.yft, ba.ytf, ba.ytt):
        assert blk.shape == (3, 3)
        assert not blk.flags.writeable
    assert not adm.y.flags.writeable
    # yff = ytt and yft = ytf with nominal tap
    np.testing.assert_array_equal(ba.yff, ba.ytt)
    np.testing.assert_array_equal(ba.yft, ba.ytf)


def test_tap_branch_blocks():
    case = load_builtin("case57")
    adm = nm.build_admittance(case)
    k = next(i for i, br in enumerate(case.branches) if br.tap != 1.0)
    br = case.branches[k]
    ba = adm.branches[k]
    y_series = 1.0 / complex(*br.z[0][0])
    t = br.tap
    assert ba.yff[0, 0] == pytest.approx((y_series + 1j * br.b_charge / 2) / t**2)
    assert ba.yft[0, 0] == pytest.approx(-y_series / t)
    assert ba.ytt[0, 0] == pytest.approx(y_series + 1j * br.b_charge / 2)


def test_singular_impedance_rejected():
    doc = json.loads(small_json_case())
    doc["branches"][0]["r"] = 0.0
    doc["branches"][0]["x"] = 0.0
    with pytest.raises(nm.CaseSemanticError, match="impedance"):
        nm.build_admittance(nm.parse_json_case(json.dumps(doc)))

    feeder = load_builtin("feeder4")
    doc3 = json.loads(nm.render_json_case(feeder))
    row = doc3["branches"][0]["z_phase"][0][0]
    for p in range(3):
        for g in range(3):
            doc3["branches"][0]["z_phase"][p][g] = list(row)
    with pytest.raises(nm.CaseSemanticError, match="singular"):
        nm.build_admittance(nm.parse_json_case(json.dumps(doc3)))


# ---------------------------------------------------------------------------
# bundled case registry

def test_builtin_registry():
    assert set(builtin_case_names()) == {"case5", "case9", "case57", "case118", "feeder4"}
    with pytest.raises(KeyError, match="case300"):
        builtin_case_path("case300")
    p = builtin_case_path("case9.m")
    assert p.endswith("case9.m")


def test_slot_layout():
    case = load_builtin("feeder4")
    # all a-phase slots first, then b, then c
    assert case.slot(2, 0) == 2
    assert case.slot(0, 1) == 4
    assert case.slot(3, 2) == 11
    assert case.nv == 24
    p, q = case.load_vectors()
    assert p[case.slot(1, 1)] == case.buses[1].p_load[1]
    assert q[case.slot(2, 2)] == case.buses[2].q_load[2]
