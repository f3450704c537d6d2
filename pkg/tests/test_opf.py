import json
import math

import numpy as np
import pytest

from cqflow import acpf, netmodel as nm, opf, sampler, surrogate
from cqflow.cases import load_builtin


def make_case(buses, branches, sources, pc=1, base=100.0):
    return nm.NetworkCase(
        name="t",
        base_mva=base,
        phase_count=pc,
        buses=tuple(buses),
        branches=tuple(branches),
        sources=tuple(sources),
    )


def two_bus(v_max=1.1, c1=25.0):
    buses = [
        nm.Bus(id=1, type=nm.SLACK, p_load=(0.0,), q_load=(0.0,),
               v_set=1.0, v_max=v_max),
        nm.Bus(id=2, type=nm.PQ, p_load=(0.8,), q_load=(0.2,), v_max=v_max),
    ]
    branches = [nm.Branch(from_bus=1, to_bus=2, z=(((0.01, 0.05),),),
                          s_max=2.0)]
    sources = [
        nm.Source(bus=1, phases=(0,), p_min=0, p_max=5, q_min=-5, q_max=5,
                  c1=c1),
    ]
    return make_case(buses, branches, sources)


def fit_all(case, train, adm, boost=12):
    targets = [acpf.bus_target(k, b.id, ph)
               for b in case.buses for ph in range(case.phase_count)
               for k in ("p", "q")]
    for bk in opf.monitored_branches(case):
        for side in ("ij", "ji"):
            for ph in range(case.phase_count):
                targets.append(acpf.flow_target("p", bk, side, ph))
                targets.append(acpf.flow_target("q", bk, side, ph))
    return {
        t: surrogate.gb_fit(train, t, boost,
                            pattern=surrogate.feature_pattern(t, adm))
        for t in targets
    }


@pytest.fixture(scope="module")
def case9_stack():
    case = load_builtin("case9")
    adm = nm.build_admittance(case)
    scen = sampler.sample_operating_scenarios(case, 400, v_bounds=(0.98, 1.02),
                                              seed=5)
    ds = sampler.generate_dataset(case, scen, workers=2)
    train, test = sampler.split_train_test(ds, 0.5, seed=5)
    models = fit_all(case, train, adm)
    env = opf.state_envelope(train, case, inflate=1.15, floor=0.002)
    loss = opf.fit_system_loss(case, train, adm=adm)
    return {
        "case": case, "adm": adm, "train": train, "test": test,
        "models": models, "env": env, "loss": loss,
    }


@pytest.fixture(scope="module")
def case9_solved(case9_stack):
    s = case9_stack
    prob = opf.build_ddcqa_opf(s["case"], s["models"], envelope=s["env"],
                               loss_model=s["loss"])
    sol = opf.solve_ddcqa_opf(prob, case=s["case"], models=s["models"])
    return prob, sol


# ---------------------------------------------------------------------------
# program assembly

def test_monitored_branches_listing():
    assert opf.monitored_branches(load_builtin("case9")) == tuple(range(9))
    assert opf.monitored_branches(load_builtin("case57")) == ()


def test_build_requires_cost_data(case9_stack):
    case = case9_stack["case"]
    stripped = nm.NetworkCase(
        name=case.name, base_mva=case.base_mva, phase_count=case.phase_count,
        buses=case.buses, branches=case.branches,
        sources=tuple(
            nm.Source(**{**src.__dict__, "c0": 0.0, "c1": 0.0, "c2": 0.0})
            for src in case.sources
        ),
    )
    with pytest.raises(ValueError, match="cost"):
        opf.build_ddcqa_opf(stripped, case9_stack["models"])


def test_build_reports_missing_model(case9_stack):
    models = dict(case9_stack["models"])
    del models["q:bus5:a"]
    with pytest.raises(ValueError, match="q:bus5:a"):
        opf.build_ddcqa_opf(case9_stack["case"], models)


def test_constraint_census(case9_stack, case9_solved):
    prob, _ = case9_solved
    counts = {}
    for blk in prob.blocks:
        counts[blk.tag.split(":")[0]] = counts.get(blk.tag.split(":")[0], 0) + 1
    case = case9_stack["case"]
    n, nbr, nsrc = case.n, len(case.branches), len(case.sources)
    assert counts["inj"] == 2 * n
    assert counts["vmax"] == n
    assert counts["box"] == nsrc
    assert "pf" not in counts
    # rated branches carry one apparent-power cone and two surrogate
    # rows per directed end
    assert counts["smax"] == 2 * nbr
    assert counts["flow"] == 4 * nbr
    assert counts["cost"] == nsrc
    assert counts["sysloss"] == 1
    assert counts["trust"] == (n - 1) + nbr + 1
    # slack voltage pin is the only equality
    assert prob.a_eq.shape[0] == 2
    vset = case.buses[case.slack_index].v_set
    np.testing.assert_allclose(sorted(prob.b_eq), sorted([vset, 0.0]))


def test_optional_blocks_stay_out_when_not_configured(case9_stack):
    prob = opf.build_ddcqa_opf(case9_stack["case"], case9_stack["models"])
    tags = {blk.tag.split(":")[0] for blk in prob.blocks}
    assert "trust" not in tags
    assert "sysloss" not in tags


def test_three_phase_build_replicates_per_phase():
    case = load_builtin("feeder4")
    adm = nm.build_admittance(case)
    scen = sampler.sample_load_scenarios(case, 60, seed=2)
    ds = sampler.generate_dataset(case, scen)
    train, _ = sampler.split_train_test(ds, 0.5, seed=2)
    models = fit_all(case, train, adm, boost=6)
    prob = opf.build_ddcqa_opf(case, models)
    inj = [blk for blk in prob.blocks if blk.tag.startswith("inj:")]
    assert len(inj) == 2 * case.n * 3
    # linear costs: no epigraph variables and no cost cones
    assert not any(name.startswith("t:") for name in prob.variable_names)
    assert not any(blk.tag.startswith("cost:") for blk in prob.blocks)
    assert prob.c[prob.variable_names.index("pg:src0:a")] > 0.0


def test_exact_operating_point_is_nearly_feasible(case9_stack, case9_solved):
    """The modeled region must hold the true system behavior.

    Constraints come from fitted models, so the true base operating
    point can miss them only by fit-sized slack, never structurally.
    """
    prob, _ = case9_solved
    case, adm = case9_stack["case"], case9_stack["adm"]
    pf = acpf.newton_raphson_pf(case, adm=adm)
    p_load, q_load = case.load_vectors()
    names = prob.variable_names
    xfull = np.zeros(len(names))
    xfull[:case.nv] = pf.x
    for k, src in enumerate(case.sources):
        slot = case.slot(case.bus_index(src.bus), 0)
        pg = pf.p[slot] + p_load[slot]
        qg = pf.q[slot] + q_load[slot]
        xfull[names.index(f"pg:src{k}:a")] = pg
        xfull[names.index(f"qg:src{k}:a")] = qg
        if f"t:src{k}:a" in names:
            xfull[names.index(f"t:src{k}:a")] = pg * pg + 0.05
    for bk, ba in enumerate(adm.branches):
        pij, qij, pji, qji = acpf.eval_line_flows(pf.x, ba)
        for nmv, val in ((f"pij:br{bk}:a", pij[0]), (f"qij:br{bk}:a", qij[0]),
                         (f"pji:br{bk}:a", pji[0]), (f"qji:br{bk}:a", qji[0])):
            if nmv in names:
                xfull[names.index(nmv)] = val
    worst = {}
    for blk in prob.blocks:
        s = blk.h - blk.g @ xfull
        if blk.kind == "nonneg":
            margin = float(s.min())
        elif blk.kind == "soc":
            margin = float(s[0] - np.linalg.norm(s[1:]))
        else:
            margin = float(2.0 * s[0] * s[1] - s[2:] @ s[2:])
        worst[blk.tag] = margin
    bad = {t: m for t, m in worst.items() if m < -0.06}
    assert not bad, f"true operating point pushed out of the feasible set: {bad}"


# ---------------------------------------------------------------------------
# cone program solution

def test_solution_fields_and_audit(case9_stack, case9_solved):
    _, sol = case9_solved
    case = case9_stack["case"]
    assert sol.status == "optimal"
    assert sol.objective > 0.0
    assert np.isfinite(sol.x).all() and len(sol.x) == case.nv
    for k, src in enumerate(case.sources):
        pg = sol.dispatch[f"pg:src{k}:a"]
        assert src.p_min - 1e-6 <= pg <= src.p_max + 1e-6
    assert set(sol.predicted) == set(case9_stack["models"])
    audit = sol.audit
    assert audit is not None
    assert set(audit) == {"mismatch", "balance", "violations",
                          "max_abs_mismatch", "max_abs_balance"}
    # small training budget here; the benchmark cases pin tight numbers
    assert audit["max_abs_mismatch"] < 0.3
    assert len(audit["balance"]) == 2 * case.n


def test_solution_tracks_brute_force_reference(case9_stack, case9_solved):
    _, sol = case9_solved
    ref = opf.acopf_oracle(case9_stack["case"], grid=13, refine=2)
    assert opf.optimality_gap(ref.objective, sol.objective) < 3.0


def test_audit_flags_low_voltage(case9_stack, case9_solved):
    _, sol = case9_solved
    from dataclasses import replace as dc_replace
    squeezed = sol
    x = squeezed.x.copy()
    x *= 0.8  # drag the whole profile under the floor
    shifted = dc_replace(squeezed, x=x, predicted={})
    audit = opf.feasibility_audit(shifted, case9_stack["case"])
    kinds = {v["kind"] for v in audit["violations"]}
    assert "v_min" in kinds


def test_solve_without_case_skips_audit(case9_stack):
    prob = opf.build_ddcqa_opf(case9_stack["case"], case9_stack["models"])
    sol = opf.solve_ddcqa_opf(prob)
    assert sol.audit is None and sol.predicted == {}


def test_solution_file_round_trip(tmp_path, case9_solved):
    _, sol = case9_solved
    path = tmp_path / "sol.json"
    opf.write_solution(sol, path)
    back = opf.read_solution(path)
    assert back.status == sol.status
    assert back.objective == pytest.approx(sol.objective)
    np.testing.assert_allclose(back.x, sol.x)
    assert back.dispatch == pytest.approx(sol.dispatch)
    assert back.flows == pytest.approx(sol.flows)
    assert back.audit["max_abs_mismatch"] == pytest.approx(
        sol.audit["max_abs_mismatch"])
    raw = json.loads(path.read_text())
    assert raw["case_fingerprint"] == sol.case_fingerprint


# ---------------------------------------------------------------------------
# trust region and aggregate balance

def test_envelope_covers_training_cloud(case9_stack):
    env, train = case9_stack["env"], case9_stack["train"]
    case = case9_stack["case"]
    assert env.distance(env.mean) < 0.05
    dists = [env.distance(row) for row in train.x]
    assert max(dists) <= 1.0 + 1e-9
    assert len(env.drop_pairs) == len(case.branches)
    # orthonormal principal directions
    np.testing.assert_allclose(env.basis @ env.basis.T,
                               np.eye(case.nv), atol=1e-10)
    far = env.mean + 5.0 * env.extent[-1] * env.basis[-1]
    assert env.distance(far) > 1.0


def test_envelope_floor_guards_dead_directions():
    rows = np.tile([1.0, 0.0, 0.9, 0.05], (30, 1))
    rows[:, 0] += np.linspace(-0.01, 0.01, 30)  # one live direction
    ds_like = type("D", (), {"x": rows})()
    env = opf.state_envelope(ds_like, inflate=1.0, floor=0.004)
    assert env.extent.min() == pytest.approx(0.004)
    assert env.extent.max() >= 0.01


def test_system_loss_fit_tracks_total_injection(case9_stack):
    loss, test = case9_stack["loss"], case9_stack["test"]
    pred = surrogate.collapse(loss).predict(test.x)
    exact = test.p_bus.sum(axis=1)
    rmse = float(np.sqrt(np.mean((pred - exact) ** 2)))
    assert rmse < 5e-3
    assert (exact > 0).all()  # lossy network: total injection is the loss


# ---------------------------------------------------------------------------
# brute-force reference

def test_oracle_without_free_dimensions_serves_load():
    case = two_bus()
    ref = opf.acopf_oracle(case, grid=3)
    assert ref.status == "optimal"
    pg = ref.dispatch["pg:src0:a"]
    assert pg == pytest.approx(0.8, abs=0.02)  # load plus small loss
    assert ref.objective == pytest.approx(25.0 * 100.0 * pg, rel=1e-6)
    assert ref.flows["pij:br0:a"] == pytest.approx(pg, abs=1e-9)


def test_oracle_reports_infeasible_grid():
    case = two_bus(v_max=0.95)  # slack pinned at 1.0 already violates
    with pytest.raises(ValueError, match="no feasible grid point"):
        opf.acopf_oracle(case, grid=3)


def test_oracle_rejects_unknown_level_bus():
    case = two_bus()
    with pytest.raises(ValueError, match="not in case"):
        opf.acopf_oracle(case, grid=3, pv_levels={99: (1.0, 1.02)})


def test_oracle_refine_only_improves():
    case = load_builtin("case9")
    coarse = opf.acopf_oracle(case, grid=7, refine=0)
    deep = opf.acopf_oracle(case, grid=7, refine=3)
    assert deep.objective <= coarse.objective + 1e-9


def test_oracle_rejects_too_many_dimensions():
    buses = [nm.Bus(id=1, type=nm.SLACK, p_load=(0.0,), q_load=(0.0,))]
    branches = []
    sources = [nm.Source(bus=1, phases=(0,), p_min=0, p_max=5,
                         q_min=-5, q_max=5, c1=1.0)]
    for i in range(2, 6):
        buses.append(nm.Bus(id=i, type=nm.PV, p_load=(0.1,), q_load=(0.0,)))
        branches.append(nm.Branch(from_bus=1, to_bus=i, z=(((0.01, 0.05),),)))
        sources.append(nm.Source(bus=i, phases=(0,), p_min=0, p_max=2,
                                 q_min=-1, q_max=1, c1=float(i)))
    case = make_case(buses, branches, sources)
    with pytest.raises(ValueError, match="at most 3"):
        opf.acopf_oracle(case, grid=3)


# ---------------------------------------------------------------------------
# benchmark metric

def test_optimality_gap_reference_points():
    assert opf.optimality_gap(17551.89, 17518.12) == 0.19
    assert opf.optimality_gap(129660.70, 129454.02) == 0.16
    assert opf.optimality_gap(5000.0, 5000.0) == 0.0


def test_optimality_gap_requires_positive_reference():
    with pytest.raises(ValueError):
        opf.optimality_gap(0.0, 10.0)
    with pytest.raises(ValueError):
        opf.optimality_gap(-3.0, 10.0)
