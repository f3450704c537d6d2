"""Power flow in rectangular voltage coordinates.

The network state is the real vector X with X[2s] = e and X[2s+1] = f
for slot s = phase * n + bus_index. This module evaluates bus injections
and branch flows on X, produces their exact quadratic forms, and solves
the power-flow equations with a dense Newton-Raphson iteration.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .netmodel import PQ, PV, SLACK, PHASES, build_admittance

# phase rotations of a balanced three-phase reference: a, b, c
PHASE_ANGLES = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)


class NonConvergenceError(RuntimeError):
    """Newton-Raphson failed; carries the divergence report."""

    def __init__(self, message, reason, mismatch, iterations):
        super().__init__(f"{message} (reason={reason}, mismatch={mismatch:.3e}, "
                         f"iterations={iterations})")
        self.reason = reason
        self.mismatch = mismatch
        self.iterations = iterations


# ---------------------------------------------------------------------------
# quantity identifiers

_TARGET_RE = re.compile(
    r"^(?P<kind>[pq]):(?:bus(?P<bus>\d+)|br(?P<br>\d+):(?P<side>ij|ji)):(?P<phase>[abc])$"
)


@dataclass(frozen=True)
class TargetId:
    """Parsed form of a quantity id like 'p:bus4:a' or 'q:br0:ij:a'."""

    kind: str  # 'p' or 'q'
    family: str  # 'bus' or 'branch'
    bus: int | None = None
    branch: int | None = None
    side: str | None = None  # 'ij' or 'ji'
    phase: int = 0

    def __str__(self):
        ph = PHASES[self.phase]
        if self.family == "bus":
            return f"{self.kind}:bus{self.bus}:{ph}"
        return f"{self.kind}:br{self.branch}:{self.side}:{ph}"


def bus_target(kind, bus_id, phase=0):
    return f"{kind}:bus{bus_id}:{PHASES[phase]}"


def flow_target(kind, branch_index, side, phase=0):
    return f"{kind}:br{branch_index}:{side}:{PHASES[phase]}"


def parse_target(target):
    if isinstance(target, TargetId):
        return target
    m = _TARGET_RE.match(target)
    if not m:
        raise ValueError(f"invalid quantity id {target!r}")
    kind = m.group("kind")
    phase = PHASES.index(m.group("phase"))
    if m.group("bus") is not None:
        return TargetId(kind=kind, family="bus", bus=int(m.group("bus")), phase=phase)
    return TargetId(
        kind=kind,
        family="branch",
        branch=int(m.group("br")),
        side=m.group("side"),
        phase=phase,
    )


def bus_targets(case, kind):
    """All injection ids of one kind, bus-major then phase."""
    return tuple(
        bus_target(kind, b.id, ph) for b in case.buses for ph in range(case.phase_count)
    )


def flow_targets(case, kind, side, branches=None):
    """Flow ids of one kind and side; `branches` restricts to those indices."""
    idx = range(len(case.branches)) if branches is None else branches
    return tuple(
        flow_target(kind, k, side, ph) for k in idx for ph in range(case.phase_count)
    )


# ---------------------------------------------------------------------------
# evaluation on a state vector

def state_to_complex(x):
    x = np.asarray(x, dtype=float)
    return x[0::2] + 1j * x[1::2]


def complex_to_state(v):
    x = np.empty(2 * len(v))
    x[0::2] = v.real
    x[1::2] = v.imag
    return x


def eval_injections(state, y):
    """Net injected (P, Q) per (bus, phase) slot, evaluated in real arithmetic."""
    x = np.asarray(state, dtype=float)
    e, f = x[0::2], x[1::2]
    g, b = y.y.real, y.y.imag
    re_i = g @ e - b @ f
    im_i = g @ f + b @ e
    p = e * re_i + f * im_i
    q = f * re_i - e * im_i
    return p, q


def eval_line_flows(state, branch):
    """Directed flows of one branch: arrays (p_ij, q_ij, p_ji, q_ji) per phase.

    Uses only the branch's own terminal voltage components; `branch` is a
    BranchAdmittance entry from build_admittance.
    """
    v = state_to_complex(state)
    fs, ts = branch.terminal_slots()
    v_f, v_t = v[fs], v[ts]
    s_from = v_f * np.conj(branch.yff @ v_f + branch.yft @ v_t)
    s_to = v_t * np.conj(branch.ytf @ v_f + branch.ytt @ v_t)
    return s_from.real, s_from.imag, s_to.real, s_to.imag


def branch_variable_map(branch):
    """Indices into X used by a branch quantity.

    Local order: (from, a), (to, a), (from, b), (to, b), (from, c),
    (to, c), with (e, f) pairs per node.
    """
    fs, ts = branch.terminal_slots()
    out = []
    for ph in range(branch.phase_count):
        for s in (fs[ph], ts[ph]):
            out.extend((2 * s, 2 * s + 1))
    return np.array(out, dtype=int)


def bus_variable_map(y, bus_index, phase):
    """Indices into X structurally coupled to one bus injection.

    The injection at slot s touches e/f of every slot with a nonzero
    admittance entry in row s (including s itself).
    """
    s = phase * y.n + bus_index
    cols = np.nonzero(y.y[s] != 0)[0]
    if s not in cols:
        cols = np.sort(np.append(cols, s))
    out = np.empty(2 * len(cols), dtype=int)
    out[0::2] = 2 * cols
    out[1::2] = 2 * cols + 1
    return out


def _stamp_quantity(c, kind, s, cols, g_row, b_row):
    """Accumulate e_s/f_s times (current at cols) terms into matrix c."""
    es, fs = 2 * s, 2 * s + 1
    ec, fc = 2 * cols, 2 * cols + 1
    if kind == "p":
        c[es, ec] += g_row
        c[es, fc] += -b_row
        c[fs, fc] += g_row
        c[fs, ec] += b_row
    else:
        c[fs, ec] += g_row
        c[fs, fc] += -b_row
        c[es, fc] += -g_row
        c[es, ec] += -b_row


def injection_matrix(target, y):
    """Exact symmetric M with X^T M X equal to the target quantity.

    Full-size over all voltage components; bus targets fill the rows and
    columns of the bus and its neighbors, branch targets only the two
    terminal node blocks. Generally indefinite.
    """
    t = parse_target(target)
    n, pc = y.n, y.phase_count
    nv = 2 * n * pc
    c = np.zeros((nv, nv))
    if t.family == "bus":
        if t.phase >= pc:
            raise ValueError(f"target {target!r}: case has {pc} phase(s)")
        s = t.phase * n + y.bus_index(t.bus)
        cols = np.arange(n * pc)
        _stamp_quantity(c, t.kind, s, cols, y.y[s].real, y.y[s].imag)
    else:
        if not 0 <= t.branch < len(y.branches):
            raise ValueError(f"target {target!r}: no such branch")
        if t.phase >= pc:
            raise ValueError(f"target {target!r}: case has {pc} phase(s)")
        ba = y.branches[t.branch]
        fs, ts = ba.terminal_slots()
        if t.side == "ij":
            s, near, far = fs[t.phase], ba.yff[t.phase], ba.yft[t.phase]
            own, other = fs, ts
        else:
            s, near, far = ts[t.phase], ba.ytt[t.phase], ba.ytf[t.phase]
            own, other = ts, fs
        _stamp_quantity(c, t.kind, s, own, near.real, near.imag)
        _stamp_quantity(c, t.kind, s, other, far.real, far.imag)
    return (c + c.T) / 2.0


# ---------------------------------------------------------------------------
# Newton-Raphson solver

@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    x: np.ndarray  # solved voltage components
    iterations: int
    mismatch: float  # final infinity-norm residual
    p: np.ndarray  # net injections per slot at the solution
    q: np.ndarray

    @property
    def v_mag(self):
        v = state_to_complex(self.x)
        return np.abs(v)


def flat_start(case):
    """Setpoint magnitudes at the balanced reference angles."""
    n, pc = case.n, case.phase_count
    x = np.zeros(2 * n * pc)
    for k, b in enumerate(case.buses):
        mag = b.v_set if b.type in (SLACK, PV) else 1.0
        for ph in range(pc):
            s = case.slot(k, ph)
            x[2 * s] = mag * math.cos(PHASE_ANGLES[ph])
            x[2 * s + 1] = mag * math.sin(PHASE_ANGLES[ph])
    return x


def power_flow_jacobian(state, y):
    """Dense partial derivatives of (P, Q) per slot w.r.t. (e, f) per slot.

    Returns (dp_de, dp_df, dq_de, dq_df), each (size x size).
    """
    x = np.asarray(state, dtype=float)
    e, f = x[0::2], x[1::2]
    g, b = y.y.real, y.y.imag
    re_i = g @ e - b @ f
    im_i = g @ f + b @ e
    dp_de = e[:, None] * g + f[:, None] * b
    dp_df = -e[:, None] * b + f[:, None] * g
    dq_de = f[:, None] * g - e[:, None] * b
    dq_df = -f[:, None] * b - e[:, None] * g
    idx = np.arange(len(e))
    dp_de[idx, idx] += re_i
    dp_df[idx, idx] += im_i
    dq_de[idx, idx] += -im_i
    dq_df[idx, idx] += re_i
    return dp_de, dp_df, dq_de, dq_df


def _slot_types(case, pv_demoted):
    """Per-slot class: 0 slack, 1 PV, 2 PQ."""
    n, pc = case.n, case.phase_count
    t = np.empty(n * pc, dtype=int)
    for k, b in enumerate(case.buses):
        if b.type == SLACK:
            code = 0
        elif b.type == PV and b.id not in pv_demoted:
            code = 1
        else:
            code = 2
        for ph in range(pc):
            t[case.slot(k, ph)] = code
    return t


def _nr_solve(case, y, p_spec, q_spec, vset2, slot_type, x0, tol, max_iter):
    x = x0.copy()
    size = y.size
    unk = np.nonzero(slot_type != 0)[0]
    pv = slot_type[unk] == 1
    u = len(unk)

    for it in range(max_iter + 1):
        e, f = x[0::2], x[1::2]
        p, q = eval_injections(x, y)
        res_p = p_spec[unk] - p[unk]
        res_2 = np.where(
            pv, vset2[unk] - (e[unk] ** 2 + f[unk] ** 2), q_spec[unk] - q[unk]
        )
        residual = np.empty(2 * u)
        residual[0::2] = res_p
        residual[1::2] = res_2
        mismatch = float(np.abs(residual).max()) if u else 0.0
        if mismatch <= tol:
            return x, it, mismatch
        if not math.isfinite(mismatch):
            raise NonConvergenceError(
                "power flow diverged", "diverged", mismatch, it
            )
        if it == max_iter:
            raise NonConvergenceError(
                "power flow did not converge", "max_iter", mismatch, it
            )

        dp_de, dp_df, dq_de, dq_df = power_flow_jacobian(x, y)
        sel = np.ix_(unk, unk)
        jac = np.empty((2 * u, 2 * u))
        jac[0::2, 0::2] = dp_de[sel]
        jac[0::2, 1::2] = dp_df[sel]
        jac[1::2, 0::2] = dq_de[sel]
        jac[1::2, 1::2] = dq_df[sel]
        # PV slots replace the reactive row with the magnitude equation
        pv_rows = 2 * np.nonzero(pv)[0] + 1
        if len(pv_rows):
            jac[pv_rows, :] = 0.0
            jac[pv_rows, pv_rows - 1] = 2.0 * e[unk[pv]]
            jac[pv_rows, pv_rows] = 2.0 * f[unk[pv]]
        try:
            delta = np.linalg.solve(jac, residual)
        except np.linalg.LinAlgError:
            raise NonConvergenceError(
                "singular power-flow Jacobian", "singular", mismatch, it
            ) from None
        x = x.copy()
        x[2 * unk] += delta[0::2]
        x[2 * unk + 1] += delta[1::2]
    raise AssertionError("unreachable")


def newton_raphson_pf(
    case,
    loads=None,
    *,
    tol=1e-8,
    max_iter=50,
    x0=None,
    enforce_q_limits=False,
    adm=None,
):
    """Solve the power-flow equations.

    loads: optional (p_load, q_load) per-slot arrays replacing the case
    loads. Slack voltage components stay pinned at the setpoint on the
    balanced reference angles; PV slots hold their magnitude setpoint.
    Raises NonConvergenceError with a reason of "max_iter", "singular"
    or "diverged" on failure.
    """
    y = adm if adm is not None else build_admittance(case)
    n, pc = case.n, case.phase_count
    if loads is None:
        p_l, q_l = case.load_vectors()
    else:
        p_l = np.asarray(loads[0], dtype=float)
        q_l = np.asarray(loads[1], dtype=float)
        if p_l.shape != (n * pc,) or q_l.shape != (n * pc,):
            raise ValueError(f"loads must be two arrays of length {n * pc}")
    p_src, q_src = case.source_set_vectors()
    p_spec = p_src - p_l
    q_spec = q_src - q_l

    vset2 = np.empty(n * pc)
    for k, b in enumerate(case.buses):
        for ph in range(pc):
            vset2[case.slot(k, ph)] = b.v_set * b.v_set

    x = flat_start(case) if x0 is None else np.asarray(x0, dtype=float).copy()
    k = case.slack_index
    for ph in range(pc):
        s = case.slot(k, ph)
        x[2 * s] = case.buses[k].v_set * math.cos(PHASE_ANGLES[ph])
        x[2 * s + 1] = case.buses[k].v_set * math.sin(PHASE_ANGLES[ph])

    demoted = {}
    for _ in range(10):
        slot_type = _slot_types(case, demoted)
        qs = q_spec.copy()
        for bus_id, q_fix in demoted.items():
            kk = case.bus_index(bus_id)
            for ph in range(pc):
                qs[case.slot(kk, ph)] = q_fix / pc - q_l[case.slot(kk, ph)]
        x, iterations, mismatch = _nr_solve(
            case, y, p_spec, qs, vset2, slot_type, x, tol, max_iter
        )
        if not enforce_q_limits:
            break
        switched = False
        _, q_calc = eval_injections(x, y)
        for k2, b in enumerate(case.buses):
            if b.type != PV or b.id in demoted:
                continue
            srcs = case.sources_at(b.id)
            if not srcs:
                continue
            lo = sum(s.q_min for s in srcs)
            hi = sum(s.q_max for s in srcs)
            q_gen = sum(
                q_calc[case.slot(k2, ph)] + q_l[case.slot(k2, ph)] for ph in range(pc)
            )
            if q_gen > hi + 1e-9:
                demoted[b.id] = hi
                switched = True
            elif q_gen < lo - 1e-9:
                demoted[b.id] = lo
                switched = True
        if not switched:
            break

    p, q = eval_injections(x, y)
    return PowerFlowSolution(x=x, iterations=iterations, mismatch=mismatch, p=p, q=q)
