"""Convex OPF assembly, brute-force benchmark and feasibility audit.

The optimization keeps the one-sided surrogate form: each learned
injection or flow quadratic bounds its dispatch expression from below,
voltage magnitudes are capped, and the whole program stays a cone
program. The audit evaluates the exact power flow equations at the
solved voltage point and reports how much the relaxation gave away.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import acpf, surrogate
from .conic import ConeBlock, ConicProblem, quad_to_soc, solve_ipm
from .netmodel import PHASES, PV, SLACK, build_admittance, case_fingerprint


@dataclass(frozen=True)
class OpfSolution:
    """One dispatch answer, from the cone program or the oracle.

    dispatch and flows are keyed by variable names (pg:src0:a,
    pij:br5:a, ...); predicted holds surrogate values at x by target
    id and is empty for oracle solutions.
    """

    status: str
    objective: float
    x: np.ndarray
    dispatch: dict
    flows: dict
    predicted: dict
    runtime_s: float
    case_fingerprint: str = ""
    variables: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    audit: dict | None = None


def monitored_branches(case):
    """Indices of branches carrying a thermal rating."""
    return tuple(k for k, br in enumerate(case.branches) if br.s_max is not None)


def _pg_name(k, ph):
    return f"pg:src{k}:{PHASES[ph]}"


def _qg_name(k, ph):
    return f"qg:src{k}:{PHASES[ph]}"


class _Layout:
    """Variable order: X components, then dispatch, flows, cost epigraphs."""

    def __init__(self, case, monitored):
        self.case = case
        n, pc = case.n, case.phase_count
        names = []
        for ph in range(pc):
            for b in case.buses:
                names.append(f"e:bus{b.id}:{PHASES[ph]}")
                names.append(f"f:bus{b.id}:{PHASES[ph]}")
        # slot s owns positions (2s, 2s+1); rebuild in index order
        ordered = [""] * (2 * n * pc)
        i = 0
        for ph in range(pc):
            for k in range(n):
                s = case.slot(k, ph)
                ordered[2 * s] = names[i]
                ordered[2 * s + 1] = names[i + 1]
                i += 2
        self.names = ordered
        self.nv = 2 * n * pc
        self.index = {}
        for k, src in enumerate(case.sources):
            for ph in src.phases:
                self._add(_pg_name(k, ph))
                self._add(_qg_name(k, ph))
        self.flow_vars = {}
        for bk in monitored:
            for ph in range(pc):
                for side in ("ij", "ji"):
                    self.flow_vars[("p", bk, ph, side)] = self._add(
                        f"p{side}:br{bk}:{PHASES[ph]}")
                    self.flow_vars[("q", bk, ph, side)] = self._add(
                        f"q{side}:br{bk}:{PHASES[ph]}")
        self.epigraph = {}
        for k, src in enumerate(case.sources):
            if src.c2 > 0.0:
                for ph in src.phases:
                    self.epigraph[(k, ph)] = self._add(f"t:src{k}:{PHASES[ph]}")
        self.total = len(self.names)

    def _add(self, name):
        self.index[name] = len(self.names)
        self.names.append(name)
        return self.index[name]

    def unit(self, name):
        e = np.zeros(self.total)
        e[self.index[name]] = 1.0
        return e


@dataclass(frozen=True)
class StateEnvelope:
    """Trust region around the training states.

    Per-slot discs bound each (e, f) pair, per-branch discs bound each
    terminal voltage difference, and the principal-axis box bounds the
    joint state, so voltage configurations whose per-bus components
    look plausible but whose combination was never observed (wild angle
    differences across a branch, for instance) stay excluded. basis
    rows are the covariance eigendirections; extent[i] bounds
    |basis[i] . (X - mean)|.
    """

    centers: np.ndarray  # (slots, 2)
    radii: np.ndarray  # (slots,)
    drop_pairs: tuple  # ((slot_i, slot_j), ...) per branch and phase
    drop_centers: np.ndarray  # (len(drop_pairs), 2)
    drop_radii: np.ndarray  # (len(drop_pairs),)
    mean: np.ndarray  # (nv,)
    basis: np.ndarray  # (nv, nv), orthonormal rows
    extent: np.ndarray  # (nv,)

    def distance(self, x):
        """Largest per-direction excursion relative to the box, 1.0 = face."""
        t = self.basis @ (np.asarray(x) - self.mean)
        return float(np.max(np.abs(t) / self.extent))


def _disc(pts, inflate, floor):
    c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    r = max(inflate * float(np.linalg.norm(pts - c, axis=1).max()), float(floor))
    return c, r


def state_envelope(dataset, case=None, inflate=1.25, floor=0.005):
    """Trust region covering the solved voltage components.

    Builds per (bus, phase) discs over each (e, f) pair, per-branch
    discs over the terminal voltage differences (when the case is
    given), and one box in the principal axes of the joint state cloud:
    each covariance eigendirection is bounded by the largest sampled
    excursion times `inflate`, with `floor` as the half-width on
    directions the data never moved along. Passed to build_ddcqa_opf,
    the envelope keeps the optimized state inside the region the models
    were fitted on. Without it nothing does: the learned inequalities
    are one-sided, and at buses with neither load nor generation the
    injection target is identically zero in every solvable state, so
    its fitted model is the zero function and the nodal balance
    constraint it should carry is vacuous. An optimizer will happily
    walk to voltage profiles where phantom power appears at such buses;
    bounding the state to the sampled cloud is what makes the one-sided
    program meaningful.
    """
    x = dataset.x
    m = x.shape[1] // 2
    centers = np.empty((m, 2))
    radii = np.empty(m)
    for s in range(m):
        centers[s], radii[s] = _disc(x[:, 2 * s:2 * s + 2], inflate, floor)
    drop_pairs = []
    if case is not None:
        for br in case.branches:
            fi, ti = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
            for ph in range(case.phase_count):
                drop_pairs.append((case.slot(fi, ph), case.slot(ti, ph)))
    drop_centers = np.empty((len(drop_pairs), 2))
    drop_radii = np.empty(len(drop_pairs))
    for k, (si, sj) in enumerate(drop_pairs):
        pts = x[:, 2 * si:2 * si + 2] - x[:, 2 * sj:2 * sj + 2]
        drop_centers[k], drop_radii[k] = _disc(pts, inflate, floor)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x), 1)
    _, vecs = np.linalg.eigh(cov)
    basis = vecs.T
    proj = np.abs(xc @ basis.T)
    extent = np.maximum(float(inflate) * proj.max(axis=0), float(floor))
    return StateEnvelope(centers=centers, radii=radii,
                         drop_pairs=tuple(drop_pairs),
                         drop_centers=drop_centers, drop_radii=drop_radii,
                         mean=mean, basis=basis, extent=extent)


def fit_system_loss(case, dataset, ridge=None, *, adm=None):
    """Fit one convex quadratic to the total active injection.

    Summed over every (bus, phase), the exact injections add up to the
    network loss plus shunt draw, a quadratic form that really is
    positive semidefinite, so unlike the per-bus targets this one is
    representable without bias. build_ddcqa_opf turns the fit into the
    aggregate row (total generation covers total load plus losses) that
    summing the per-bus rows would give if their fits were exact. The
    feature pattern keeps only variable pairs the network couples.
    """
    if adm is None:
        adm = build_admittance(case)
    nv = dataset.x.shape[1]
    total = np.zeros((nv, nv))
    for b in case.buses:
        for ph in range(case.phase_count):
            t = acpf.parse_target(acpf.bus_target("p", b.id, ph))
            total += acpf.injection_matrix(t, adm)
    pairs = tuple(
        (a, c) for a in range(nv) for c in range(a, nv)
        if total[a, c] != 0.0 or total[c, a] != 0.0
    )
    pattern = surrogate.FeaturePattern(
        kind="admittance-sparse", variable_map=np.arange(nv), pairs=pairs
    )
    y = dataset.p_bus.sum(axis=1)
    return surrogate.fit_quadratic(dataset.x, y, pattern, ridge=ridge,
                                   target_id="loss:p")


def build_ddcqa_opf(case, models, *, monitored=None, envelope=None,
                    loss_model=None):
    """Assemble the convex OPF cone program from collapsed surrogates.

    models maps target ids to fitted surrogates (ensembles are
    collapsed here). Surrogate injection inequalities bound net
    generation per (bus, phase), flow surrogates feed the rated-branch
    apparent-power cones, and quadratic generation cost enters through
    per-phase epigraph variables. Slack voltage components are pinned
    at their setpoint, matching every training state. An optional
    state_envelope adds one trust disc per (bus, phase) so the solved
    state stays where the models have seen data, and an optional
    fit_system_loss model adds the aggregate power-balance row.
    """
    if monitored is None:
        monitored = monitored_branches(case)
    if not any(s.c1 != 0.0 or s.c2 != 0.0 for s in case.sources):
        raise ValueError("no cost data on any source")
    lay = _Layout(case, monitored)
    n, pc, base = case.n, case.phase_count, case.base_mva

    def model_for(target):
        try:
            return surrogate.collapse(models[target])
        except KeyError:
            raise ValueError(f"missing model for target {target}") from None

    blocks = []
    p_load, q_load = case.load_vectors()
    sources_on = {}
    for k, src in enumerate(case.sources):
        bi = case.bus_index(src.bus)
        for ph in src.phases:
            sources_on.setdefault((bi, ph), []).append(k)

    for bi, b in enumerate(case.buses):
        for ph in range(pc):
            slot = case.slot(bi, ph)
            for kind, gname, load in (
                ("p", _pg_name, p_load[slot]),
                ("q", _qg_name, q_load[slot]),
            ):
                target = acpf.bus_target(kind, b.id, ph)
                coef = np.zeros(lay.total)
                for k in sources_on.get((bi, ph), ()):
                    coef[lay.index[gname(k, ph)]] = 1.0
                blocks.append(
                    quad_to_soc(
                        model_for(target),
                        coef,
                        -load,
                        nvar=lay.total,
                        tag=f"inj:{target}",
                    )
                )

    for bi, b in enumerate(case.buses):
        if not math.isfinite(b.v_max):
            continue
        for ph in range(pc):
            slot = case.slot(bi, ph)
            g = np.zeros((3, lay.total))
            g[1, 2 * slot] = -1.0
            g[2, 2 * slot + 1] = -1.0
            h = np.array([b.v_max, 0.0, 0.0])
            blocks.append(
                ConeBlock(kind="soc", g=g, h=h, tag=f"vmax:bus{b.id}:{PHASES[ph]}")
            )

    for k, src in enumerate(case.sources):
        for ph in src.phases:
            rows, rhs = [], []
            for name, lo, hi in (
                (_pg_name(k, ph), src.p_min, src.p_max),
                (_qg_name(k, ph), src.q_min, src.q_max),
            ):
                e = lay.unit(name)
                if math.isfinite(lo):
                    rows.append(-e)
                    rhs.append(-lo)
                if math.isfinite(hi):
                    rows.append(e)
                    rhs.append(hi)
            if rows:
                blocks.append(
                    ConeBlock(
                        kind="nonneg",
                        g=np.array(rows),
                        h=np.array(rhs),
                        tag=f"box:src{k}:{PHASES[ph]}",
                    )
                )
            if src.pf_min is not None:
                t = math.tan(math.acos(src.pf_min))
                ep = lay.unit(_pg_name(k, ph))
                eq = lay.unit(_qg_name(k, ph))
                blocks.append(
                    ConeBlock(
                        kind="nonneg",
                        g=np.array([eq - t * ep, -eq - t * ep]),
                        h=np.zeros(2),
                        tag=f"pf:src{k}:{PHASES[ph]}",
                    )
                )

    # both directed ends: a one-sided surrogate row only pushes its flow
    # variable up, so a rating can bind only on the end whose true flow
    # is positive, and either end can be that one
    for bk in monitored:
        br = case.branches[bk]
        for ph in range(pc):
            for side in ("ij", "ji"):
                pv = lay.flow_vars[("p", bk, ph, side)]
                qv = lay.flow_vars[("q", bk, ph, side)]
                g = np.zeros((3, lay.total))
                g[1, pv] = -1.0
                g[2, qv] = -1.0
                h = np.array([br.s_max, 0.0, 0.0])
                blocks.append(
                    ConeBlock(kind="soc", g=g, h=h,
                              tag=f"smax:br{bk}:{side}:{PHASES[ph]}")
                )
                for kind, var in (("p", pv), ("q", qv)):
                    target = acpf.flow_target(kind, bk, side, ph)
                    coef = np.zeros(lay.total)
                    coef[var] = 1.0
                    blocks.append(
                        quad_to_soc(
                            model_for(target),
                            coef,
                            0.0,
                            nvar=lay.total,
                            tag=f"flow:{target}",
                        )
                    )

    if loss_model is not None:
        coef = np.zeros(lay.total)
        for k, src in enumerate(case.sources):
            for ph in src.phases:
                coef[lay.index[_pg_name(k, ph)]] = 1.0
        blocks.append(
            quad_to_soc(
                surrogate.collapse(loss_model),
                coef,
                -float(p_load.sum()),
                nvar=lay.total,
                tag="sysloss",
            )
        )

    if envelope is not None:
        sk_skip = case.slack_index
        for bi, b in enumerate(case.buses):
            if bi == sk_skip:
                continue  # pinned by the equality rows already
            for ph in range(pc):
                slot = case.slot(bi, ph)
                g = np.zeros((3, lay.total))
                g[1, 2 * slot] = -1.0
                g[2, 2 * slot + 1] = -1.0
                h = np.array([envelope.radii[slot],
                              -envelope.centers[slot, 0],
                              -envelope.centers[slot, 1]])
                blocks.append(
                    ConeBlock(
                        kind="soc", g=g, h=h,
                        tag=f"trust:bus{b.id}:{PHASES[ph]}",
                    )
                )
        for k, (si, sj) in enumerate(envelope.drop_pairs):
            g = np.zeros((3, lay.total))
            g[1, 2 * si] = -1.0
            g[1, 2 * sj] = 1.0
            g[2, 2 * si + 1] = -1.0
            g[2, 2 * sj + 1] = 1.0
            h = np.array([envelope.drop_radii[k],
                          -envelope.drop_centers[k, 0],
                          -envelope.drop_centers[k, 1]])
            blocks.append(
                ConeBlock(kind="soc", g=g, h=h, tag=f"trust:drop{k}")
            )
        nv = 2 * n * pc
        g = np.zeros((2 * nv, lay.total))
        g[:nv, :nv] = envelope.basis
        g[nv:, :nv] = -envelope.basis
        off = envelope.basis @ envelope.mean
        h = np.concatenate([envelope.extent + off, envelope.extent - off])
        blocks.append(ConeBlock(kind="nonneg", g=g, h=h, tag="trust:joint"))

    for (k, ph), tv in lay.epigraph.items():
        g = np.zeros((3, lay.total))
        g[0, tv] = -1.0
        g[2, lay.index[_pg_name(k, ph)]] = -1.0
        h = np.array([0.0, 0.5, 0.0])
        blocks.append(
            ConeBlock(kind="rsoc", g=g, h=h, tag=f"cost:src{k}:{PHASES[ph]}")
        )

    # slack voltage pin: every training state holds these exactly
    sk = case.slack_index
    vset = case.buses[sk].v_set
    a_rows, b_rows = [], []
    for ph in range(pc):
        slot = case.slot(sk, ph)
        for comp, val in (
            (2 * slot, vset * math.cos(acpf.PHASE_ANGLES[ph])),
            (2 * slot + 1, vset * math.sin(acpf.PHASE_ANGLES[ph])),
        ):
            row = np.zeros(lay.total)
            row[comp] = 1.0
            a_rows.append(row)
            b_rows.append(val)

    c = np.zeros(lay.total)
    offset = 0.0
    for k, src in enumerate(case.sources):
        for ph in src.phases:
            offset += src.c0
            c[lay.index[_pg_name(k, ph)]] += src.c1 * base
            if (k, ph) in lay.epigraph:
                c[lay.epigraph[(k, ph)]] += src.c2 * base * base

    return ConicProblem(
        variable_names=tuple(lay.names),
        c=c,
        a_eq=np.array(a_rows),
        b_eq=np.array(b_rows),
        blocks=tuple(blocks),
        objective_offset=offset,
    )


def solve_ddcqa_opf(problem, *, case=None, models=None, tol=1e-8, max_iter=200):
    """Solve the assembled cone program and unmap the variables.

    Passing case attaches the physical-feasibility audit; passing
    models additionally records surrogate predictions at the solved
    voltage point. Solver statuses propagate unchanged.
    """
    t0 = time.perf_counter()
    sol = solve_ipm(problem, tol=tol, max_iter=max_iter)
    runtime = time.perf_counter() - t0

    names = problem.variable_names
    nv = sum(1 for nm in names if nm.startswith(("e:", "f:")))
    x = np.asarray(sol.x[:nv], dtype=float)
    dispatch, flows, variables = {}, {}, {}
    for nm, val in zip(names, sol.x):
        variables[nm] = float(val)
        if nm.startswith(("pg:", "qg:")):
            dispatch[nm] = float(val)
        elif nm.startswith(("pij:", "qij:", "pji:", "qji:")):
            flows[nm] = float(val)

    predicted = {}
    if models is not None and sol.status == "optimal":
        for target, m in models.items():
            predicted[target] = float(surrogate.collapse(m).predict(x))

    out = OpfSolution(
        status=sol.status,
        objective=float(sol.objective),
        x=x,
        dispatch=dispatch,
        flows=flows,
        predicted=predicted,
        runtime_s=runtime,
        case_fingerprint=case_fingerprint(case) if case is not None else "",
        variables=variables,
        residuals=dict(sol.residuals),
        iterations=sol.iterations,
    )
    if case is not None and sol.status == "optimal":
        out = replace(out, audit=feasibility_audit(out, case))
    return out


# ---------------------------------------------------------------------------
# brute-force benchmark

def _marginal_price(src, base, p):
    return base * (src.c1 + 2.0 * src.c2 * base * p)


def _split_total(sources, total, base):
    """Cheapest split of a bus total among its sources, within boxes."""
    if len(sources) == 1:
        return [total]
    lo = sum(s.p_min for s in sources)
    hi = sum(s.p_max for s in sources)
    total = min(max(total, lo), hi)

    def alloc(price):
        out = []
        for s in sources:
            if s.c2 > 0.0:
                p = (price / base - s.c1) / (2.0 * s.c2 * base)
            else:
                p = s.p_max if price >= _marginal_price(s, base, 0.0) else s.p_min
            out.append(min(max(p, s.p_min), s.p_max))
        return out

    plo = min(_marginal_price(s, base, s.p_min) for s in sources) - 1.0
    phi = max(_marginal_price(s, base, s.p_max) for s in sources) + 1.0
    for _ in range(100):
        mid = 0.5 * (plo + phi)
        if sum(alloc(mid)) < total:
            plo = mid
        else:
            phi = mid
    out = alloc(phi)
    # distribute any step-function remainder among equal-price sources
    gap = total - sum(out)
    for i, s in enumerate(sources):
        if abs(gap) <= 1e-12:
            break
        room = (s.p_max - out[i]) if gap > 0 else (s.p_min - out[i])
        step = min(gap, room) if gap > 0 else max(gap, room)
        out[i] += step
        gap -= step
    return out


def _interp_split(sources, total, lo_attr, hi_attr):
    """Affine split of a total that respects every source box."""
    los = [getattr(s, lo_attr) for s in sources]
    his = [getattr(s, hi_attr) for s in sources]
    span = sum(his) - sum(los)
    if span <= 0.0:
        return list(los)
    t = (total - sum(los)) / span
    return [lo + t * (hi - lo) for lo, hi in zip(los, his)]


def acopf_oracle(
    case,
    grid=13,
    *,
    adm=None,
    workers=1,
    pf_tol=1e-8,
    feas_tol=1e-6,
    pv_levels=None,
    refine=2,
    refine_grid=None,
):
    """Grid-enumerated exact-AC benchmark dispatch.

    Enumerates active power totals of non-slack generator buses on a
    per-dimension grid, solves the exact power flow for each point,
    drops points violating voltage, reactive or thermal limits, and
    zooms in around the cheapest survivor for `refine` passes, each
    pass shrinking every axis to one step of the previous one and
    sampling refine_grid points per axis (grid when omitted).
    Reactive dispatch rides the power-flow solution. At most 3 free
    dimensions.

    pv_levels, when given, enumerates voltage setpoint multipliers as
    extra axes. A plain sequence adds two axes: one on the slack bus,
    one shared by every PV bus. A mapping {bus_id_or_tuple: levels}
    adds one axis per entry, each multiplying the setpoints of the
    listed buses only. Needed when no dispatch is feasible at the case
    setpoints, so the reference search must move voltage too; the
    mapping form handles systems where one shared multiplier cannot
    clear a low-voltage pocket without pushing another bus over its
    cap.
    """
    if grid < 1:
        raise ValueError("grid resolution must be positive")
    rgrid = grid if refine_grid is None else int(refine_grid)
    if rgrid < 2:
        raise ValueError("refine grid must be at least 2")
    t0 = time.perf_counter()
    y = adm if adm is not None else build_admittance(case)
    n, pc, base = case.n, case.phase_count, case.base_mva
    p_load, q_load = case.load_vectors()
    p_base, _ = case.source_set_vectors()

    by_bus = {}
    for k, src in enumerate(case.sources):
        by_bus.setdefault(case.bus_index(src.bus), []).append(k)
    sk = case.slack_index
    free = []
    for bi, ks in sorted(by_bus.items()):
        if bi == sk:
            continue
        lo = sum(case.sources[k].p_min for k in ks)
        hi = sum(case.sources[k].p_max for k in ks)
        if hi - lo > 1e-12:
            free.append((bi, lo, hi))
    if len(free) > 3:
        raise ValueError(
            f"{len(free)} free dispatch dimensions; the oracle handles at most 3"
        )
    v_axes, level_axes, v_groups = 0, [], []
    if isinstance(pv_levels, dict):
        known = {b.id for b in case.buses}
        for key, vals in pv_levels.items():
            ids = tuple(key) if isinstance(key, (tuple, list)) else (key,)
            missing = [i for i in ids if i not in known]
            if missing:
                raise ValueError(f"pv_levels bus {missing[0]} not in case")
            v_groups.append(frozenset(ids))
            level_axes.append([float(v) for v in vals])
        v_axes = len(v_groups)
    elif pv_levels is not None:
        levels = [float(v) for v in pv_levels]
        has_pv = any(b.type == PV for b in case.buses)
        v_axes = 1 + int(has_pv)
        level_axes = [levels] * v_axes

    def case_at(vmults):
        if not v_axes:
            return case
        if v_groups:
            by_id = {}
            for ids, m in zip(v_groups, vmults):
                for i in ids:
                    by_id[i] = m
            buses = tuple(
                replace(b, v_set=b.v_set * by_id[b.id]) if b.id in by_id else b
                for b in case.buses
            )
            return replace(case, buses=buses)
        v_sl = vmults[0]
        v_pv = vmults[1] if len(vmults) > 1 else 1.0
        buses = []
        for b in case.buses:
            if b.type == SLACK:
                buses.append(replace(b, v_set=b.v_set * v_sl))
            elif b.type == PV:
                buses.append(replace(b, v_set=b.v_set * v_pv))
            else:
                buses.append(b)
        return replace(case, buses=tuple(buses))

    def evaluate(point):
        """Cost and state for free-bus totals plus any voltage levels."""
        totals = point[:len(free)]
        case_i = case_at(point[len(free):])
        p_l = p_load.copy()
        for (bi, _, _), t in zip(free, totals):
            for ph in range(pc):
                ks = [k for k in by_bus[bi] if ph in case.sources[k].phases]
                if not ks:
                    continue
                split = _split_total([case.sources[k] for k in ks], t, base)
                slot = case.slot(bi, ph)
                for k, p in zip(ks, split):
                    # steer p_spec through the load override
                    p_l[slot] -= p - case.sources[k].p_set
        try:
            pf = acpf.newton_raphson_pf(
                case_i, loads=(p_l, q_load), adm=y, tol=pf_tol,
                enforce_q_limits=True,
            )
        except acpf.NonConvergenceError:
            return None
        vm = pf.v_mag
        for bi, b in enumerate(case.buses):
            for ph in range(pc):
                v = vm[case.slot(bi, ph)]
                if v > b.v_max + feas_tol or v < b.v_min - feas_tol:
                    return None
        # realized per-phase generation = exact injection + true load
        for bi, ks_all in by_bus.items():
            for ph in range(pc):
                srcs = [case.sources[k] for k in ks_all if ph in case.sources[k].phases]
                if not srcs:
                    continue
                slot = case.slot(bi, ph)
                pg = pf.p[slot] + p_load[slot]
                qg = pf.q[slot] + q_load[slot]
                if not (
                    sum(s.p_min for s in srcs) - feas_tol
                    <= pg
                    <= sum(s.p_max for s in srcs) + feas_tol
                ):
                    return None
                if not (
                    sum(s.q_min for s in srcs) - feas_tol
                    <= qg
                    <= sum(s.q_max for s in srcs) + feas_tol
                ):
                    return None
        for bk, br in enumerate(y.branches):
            smax = case.branches[bk].s_max
            if smax is None:
                continue
            pij, qij, pji, qji = acpf.eval_line_flows(pf.x, br)
            lim = smax + feas_tol
            if np.any(np.hypot(pij, qij) > lim) or np.any(np.hypot(pji, qji) > lim):
                return None
        cost = 0.0
        dispatch = {}
        for bi, ks_all in by_bus.items():
            for ph in range(pc):
                ks = [k for k in ks_all if ph in case.sources[k].phases]
                if not ks:
                    continue
                srcs = [case.sources[k] for k in ks]
                slot = case.slot(bi, ph)
                psplit = _split_total(srcs, pf.p[slot] + p_load[slot], base)
                qsplit = _interp_split(
                    srcs, pf.q[slot] + q_load[slot], "q_min", "q_max"
                )
                for k, src, p, q in zip(ks, srcs, psplit, qsplit):
                    cost += src.c0 + src.c1 * base * p + src.c2 * (base * p) ** 2
                    dispatch[_pg_name(k, ph)] = float(p)
                    dispatch[_qg_name(k, ph)] = float(q)
        return cost, dispatch, pf.x

    # dispatch totals whose slack residual cannot land in the slack
    # capability box fail before the power-flow solve; headroom covers
    # network loss (always positive, never near 10% of demand here)
    sk_lo = sum(case.sources[k].p_min for k in by_bus.get(sk, []))
    sk_hi = sum(case.sources[k].p_max for k in by_bus.get(sk, []))
    demand = float(p_load.sum())
    headroom = 0.1 * abs(demand)

    def plausible(point):
        if not free:
            return True
        residual = demand - sum(point[:len(free)])
        return sk_lo - feas_tol <= residual + headroom and residual <= sk_hi + feas_tol

    def sweep(axes):
        combos = [c for c in (itertools.product(*axes) if axes else [()])
                  if plausible(c)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(evaluate, combos))
        else:
            results = [evaluate(c) for c in combos]
        best = None
        for combo, res in zip(combos, results):
            if res is not None and (best is None or res[0] < best[0]):
                best = (*res, combo)
        return best

    axes = [np.linspace(lo, hi, grid) for _, lo, hi in free]
    bounds = [(lo, hi) for _, lo, hi in free]
    for lv in level_axes:
        axes.append(np.asarray(lv))
        bounds.append((min(lv), max(lv)))
    best = sweep(axes)
    if best is not None and axes:
        steps = [
            (hi - lo) / (len(ax) - 1) if len(ax) > 1 else 0.0
            for ax, (lo, hi) in zip(axes, bounds)
        ]
        for _ in range(max(0, refine)):
            axes = [
                np.linspace(max(lo, t - st), min(hi, t + st), rgrid)
                for (lo, hi), t, st in zip(bounds, best[3], steps)
            ]
            refined = sweep(axes)
            if refined is not None and refined[0] < best[0]:
                best = refined
            steps = [2.0 * st / (rgrid - 1) for st in steps]
    if best is None:
        raise ValueError("no feasible grid point")
    cost, dispatch, x = best[0], best[1], best[2]

    flows = {}
    for bk, br in enumerate(y.branches):
        if case.branches[bk].s_max is None:
            continue
        pij, qij, pji, qji = acpf.eval_line_flows(x, br)
        for ph in range(pc):
            flows[f"pij:br{bk}:{PHASES[ph]}"] = float(pij[ph])
            flows[f"qij:br{bk}:{PHASES[ph]}"] = float(qij[ph])
            flows[f"pji:br{bk}:{PHASES[ph]}"] = float(pji[ph])
            flows[f"qji:br{bk}:{PHASES[ph]}"] = float(qji[ph])

    return OpfSolution(
        status="optimal",
        objective=float(cost),
        x=np.asarray(x, dtype=float),
        dispatch=dispatch,
        flows=flows,
        predicted={},
        runtime_s=time.perf_counter() - t0,
        case_fingerprint=case_fingerprint(case),
    )


def optimality_gap(ov_ref, ov):
    """Percent gap |ref - ov| / ref * 100, reported to two decimals."""
    if not ov_ref > 0:
        raise ValueError("reference objective must be positive")
    return round(abs(ov_ref - ov) / ov_ref * 100.0, 2)


def feasibility_audit(sol, case, *, adm=None, tol=1e-6):
    """Exact-equation check of a solution's voltage point.

    Returns surrogate-minus-exact mismatch per predicted target, the
    per-slot power balance residual (generation minus load minus exact
    injection), and limit violations evaluated on exact AC quantities,
    including the lower voltage bound the cone program omits.
    """
    y = adm if adm is not None else build_admittance(case)
    n, pc = case.n, case.phase_count
    p_ex, q_ex = acpf.eval_injections(sol.x, y)
    p_load, q_load = case.load_vectors()

    p_d = np.zeros(n * pc)
    q_d = np.zeros(n * pc)
    for key, val in sol.dispatch.items():
        kind, src_part, ph_part = key.split(":")
        k = int(src_part[3:])
        ph = PHASES.index(ph_part)
        slot = case.slot(case.bus_index(case.sources[k].bus), ph)
        (p_d if kind == "pg" else q_d)[slot] += val

    balance = {}
    for b in case.buses:
        for ph in range(pc):
            slot = case.slot(case.bus_index(b.id), ph)
            balance[acpf.bus_target("p", b.id, ph)] = float(
                p_d[slot] - p_load[slot] - p_ex[slot]
            )
            balance[acpf.bus_target("q", b.id, ph)] = float(
                q_d[slot] - q_load[slot] - q_ex[slot]
            )

    flow_cache = {}

    def exact_value(target):
        t = acpf.parse_target(target)
        if t.family == "bus":
            slot = case.slot(case.bus_index(t.bus), t.phase)
            return (p_ex if t.kind == "p" else q_ex)[slot]
        if t.branch not in flow_cache:
            flow_cache[t.branch] = acpf.eval_line_flows(sol.x, y.branches[t.branch])
        pij, qij, pji, qji = flow_cache[t.branch]
        table = {("p", "ij"): pij, ("q", "ij"): qij, ("p", "ji"): pji, ("q", "ji"): qji}
        return table[(t.kind, t.side)][t.phase]

    mismatch = {
        target: float(pred - exact_value(target))
        for target, pred in sol.predicted.items()
    }

    violations = []
    vm = np.abs(acpf.state_to_complex(sol.x))
    for bi, b in enumerate(case.buses):
        for ph in range(pc):
            v = vm[case.slot(bi, ph)]
            if v > b.v_max + tol:
                violations.append(
                    {"kind": "v_max", "where": f"bus{b.id}:{PHASES[ph]}",
                     "amount": float(v - b.v_max)}
                )
            if v < b.v_min - tol:
                violations.append(
                    {"kind": "v_min", "where": f"bus{b.id}:{PHASES[ph]}",
                     "amount": float(b.v_min - v)}
                )
    for bk, br in enumerate(y.branches):
        smax = case.branches[bk].s_max
        if smax is None:
            continue
        pij, qij, pji, qji = acpf.eval_line_flows(sol.x, br)
        for ph in range(pc):
            for side, s_abs in (("ij", np.hypot(pij, qij)[ph]),
                                ("ji", np.hypot(pji, qji)[ph])):
                if s_abs > smax + tol:
                    violations.append(
                        {"kind": "s_max",
                         "where": f"br{bk}:{side}:{PHASES[ph]}",
                         "amount": float(s_abs - smax)}
                    )

    return {
        "mismatch": mismatch,
        "balance": balance,
        "violations": violations,
        "max_abs_mismatch": max((abs(v) for v in mismatch.values()), default=0.0),
        "max_abs_balance": max((abs(v) for v in balance.values()), default=0.0),
    }


def write_solution(sol, path):
    """Solution file: dispatch, voltage point, objective and audit."""
    doc = {
        "case_fingerprint": sol.case_fingerprint,
        "status": sol.status,
        "objective": sol.objective,
        "dispatch": sol.dispatch,
        "flows": sol.flows,
        "X": [float(v) for v in np.asarray(sol.x).ravel()],
        "runtime_s": sol.runtime_s,
        "iterations": sol.iterations,
        "residuals": sol.residuals,
        "audit": sol.audit,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_solution(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return OpfSolution(
        status=doc["status"],
        objective=float(doc["objective"]),
        x=np.asarray(doc["X"], dtype=float),
        dispatch=dict(doc["dispatch"]),
        flows=dict(doc["flows"]),
        predicted={},
        runtime_s=float(doc["runtime_s"]),
        case_fingerprint=doc.get("case_fingerprint", ""),
        iterations=int(doc.get("iterations", 0)),
        residuals=dict(doc.get("residuals") or {}),
        audit=doc.get("audit"),
    )
