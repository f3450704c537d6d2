"""Monte Carlo operating data: load scenarios, solved states, datasets.

Each scenario scales every bus load by its own uniform multiplier, gets
solved by Newton-Raphson warm-started from the base-case solution, and
contributes one row of (X, injections, branch flows). Scenario rows are
reproducible individually: the multiplier stream for scenario i depends
only on (seed, i), never on the scenario count, execution order or
worker count.
"""

from __future__ import annotations

import hashlib
import io
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import acpf
from .netmodel import PHASES, PV, SLACK, build_admittance, case_fingerprint


@dataclass(frozen=True)
class LoadScenarios:
    """Per-bus load multipliers for a batch of scenarios.

    source_power, when present, gives per-scenario active setpoints for
    every source (absolute, p.u. per phase); None keeps the base
    setpoints from the case.
    """

    seed: int
    lo: float
    hi: float
    scenario_ids: np.ndarray  # (m,)
    multipliers: np.ndarray  # (m, n), aligned with case.buses
    source_power: np.ndarray | None = None  # (m, n_src)
    pv_magnitude: np.ndarray | None = None  # (m, n); used at PV buses only


def sample_load_scenarios(case, count, bounds=(0.6, 1.1), seed=0):
    """Draw per-bus uniform load multipliers for `count` scenarios."""
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (lo <= hi):
        raise ValueError(f"invalid multiplier range {bounds}")
    if count < 0:
        raise ValueError("count must be nonnegative")
    mult = np.empty((count, case.n))
    for i in range(count):
        mult[i] = np.random.default_rng([seed, i]).uniform(lo, hi, case.n)
    return LoadScenarios(
        seed=seed,
        lo=lo,
        hi=hi,
        scenario_ids=np.arange(count),
        multipliers=mult,
    )


def sample_operating_scenarios(case, count, bounds=(0.6, 1.1),
                               v_bounds=(0.95, 1.05), dispatch_bounds=None,
                               seed=0):
    """Load multipliers plus dispatch and voltage setpoints varied too.

    Loads follow the per-bus uniform scheme of sample_load_scenarios.
    Two extra controls move with them, mimicking how an operator would
    actually run the system across the captured states:

    - active setpoints of sources at non-slack buses get their own
      uniform multiplier, clipped to the capability box (slack sources
      keep p_set; the slack absorbs the residual anyway); the
      multiplier interval is dispatch_bounds when given, else bounds;
    - PV-bus voltage setpoints get a uniform multiplier from v_bounds,
      capped at the bus magnitude limit.

    Both matter when the models feed an optimal dispatch problem.
    Under pure load scaling the injection at a generation-only bus
    never moves, so a fitted model can only predict that constant, and
    every PV-bus voltage sits on a circle of fixed radius, leaving the
    fits unidentified in the radial direction an optimizer is free to
    move. The intervals stay near the operating point: convex
    quadratics track the indefinite exact forms closely only while the
    state cloud is narrow. Widen dispatch_bounds past bounds when an
    optimizer is expected to push sources toward capability limits the
    setpoint interval cannot reach; states near those limits have to
    appear in the data for the fits to hold there.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    vlo, vhi = float(v_bounds[0]), float(v_bounds[1])
    if dispatch_bounds is None:
        dispatch_bounds = (lo, hi)
    dlo, dhi = float(dispatch_bounds[0]), float(dispatch_bounds[1])
    if not (lo <= hi):
        raise ValueError(f"invalid multiplier range {bounds}")
    if not (dlo <= dhi):
        raise ValueError(f"invalid multiplier range {dispatch_bounds}")
    if not (0.0 < vlo <= vhi):
        raise ValueError(f"invalid voltage multiplier range {v_bounds}")
    if count < 0:
        raise ValueError("count must be nonnegative")
    slack = case.buses[case.slack_index].id
    p_lo = np.array([s.p_min for s in case.sources])
    p_hi = np.array([s.p_max for s in case.sources])
    fixed = np.array([s.bus == slack for s in case.sources])
    p_set = np.array([s.p_set for s in case.sources])
    v_set = np.array([b.v_set for b in case.buses])
    v_cap = np.array([b.v_max if np.isfinite(b.v_max) else np.inf
                      for b in case.buses])
    mult = np.empty((count, case.n))
    power = np.empty((count, len(case.sources)))
    vmag = np.empty((count, case.n))
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        mult[i] = rng.uniform(lo, hi, case.n)
        u = rng.uniform(dlo, dhi, len(case.sources))
        power[i] = np.where(fixed, p_set, np.clip(p_set * u, p_lo, p_hi))
        vmag[i] = np.minimum(v_set * rng.uniform(vlo, vhi, case.n), v_cap)
    return LoadScenarios(
        seed=seed,
        lo=lo,
        hi=hi,
        scenario_ids=np.arange(count),
        multipliers=mult,
        source_power=power,
        pv_magnitude=vmag,
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Solved operating points and their exact target quantities.

    Row-aligned arrays; targets are addressed by quantity id through
    column(). Branch flow columns cover every branch in case order.
    """

    case_fingerprint: str
    phase_count: int
    bus_ids: tuple
    seed: int
    lo: float
    hi: float
    pf_tol: float
    dropped: int
    scenario_ids: np.ndarray  # (m,)
    multipliers: np.ndarray  # (m, n)
    x: np.ndarray  # (m, 2 * n * pc)
    p_bus: np.ndarray  # (m, n * pc), slot order
    q_bus: np.ndarray
    p_ij: np.ndarray  # (m, nbr * pc), branch-major then phase
    q_ij: np.ndarray
    p_ji: np.ndarray
    q_ji: np.ndarray

    @property
    def count(self):
        return len(self.scenario_ids)

    @property
    def n(self):
        return len(self.bus_ids)

    @property
    def branch_count(self):
        return self.p_ij.shape[1] // self.phase_count

    def column(self, target):
        """Target values for all rows, by quantity id."""
        t = acpf.parse_target(target)
        if t.phase >= self.phase_count:
            raise ValueError(f"target {target!r}: dataset has {self.phase_count} phase(s)")
        if t.family == "bus":
            try:
                k = self.bus_ids.index(t.bus)
            except ValueError:
                raise ValueError(f"target {target!r}: no such bus") from None
            col = t.phase * self.n + k
            return self.p_bus[:, col] if t.kind == "p" else self.q_bus[:, col]
        if not 0 <= t.branch < self.branch_count:
            raise ValueError(f"target {target!r}: no such branch")
        col = t.branch * self.phase_count + t.phase
        arr = {
            ("p", "ij"): self.p_ij,
            ("q", "ij"): self.q_ij,
            ("p", "ji"): self.p_ji,
            ("q", "ji"): self.q_ji,
        }[(t.kind, t.side)]
        return arr[:, col]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=int)
        return replace(
            self,
            scenario_ids=self.scenario_ids[rows],
            multipliers=self.multipliers[rows],
            x=self.x[rows],
            p_bus=self.p_bus[rows],
            q_bus=self.q_bus[rows],
            p_ij=self.p_ij[rows],
            q_ij=self.q_ij[rows],
            p_ji=self.p_ji[rows],
            q_ji=self.q_ji[rows],
        )

    def fingerprint(self):
        """Digest of the rows and their provenance, for model metadata."""
        h = hashlib.sha256()
        h.update(self.case_fingerprint.encode())
        for arr in (self.scenario_ids, self.multipliers, self.x):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _scale_loads(p_base, q_base, mult, pc):
    scale = np.tile(mult, pc)
    return p_base * scale, q_base * scale


def generate_dataset(case, scenarios, *, tol=1e-8, max_iter=50, workers=1):
    """Solve every scenario and assemble the dataset.

    Scenarios whose power flow fails to converge are dropped (counted in
    the metadata). Results are assembled in scenario-id order whatever
    the worker count, and every solve warm-starts from the one base-case
    solution, so the output bytes do not depend on `workers`.
    """
    adm = build_admittance(case)
    n, pc = case.n, case.phase_count
    p_base, q_base = case.load_vectors()
    base = acpf.newton_raphson_pf(case, adm=adm, tol=tol, max_iter=max_iter)

    power = getattr(scenarios, "source_power", None)
    redispatch = []
    if power is not None:
        # setpoint changes ride in through the load override: subtracting
        # d from P_L at a slot raises the scheduled injection by d
        for k, s in enumerate(case.sources):
            bi = case.bus_index(s.bus)
            if case.buses[bi].type == SLACK:
                continue
            slots = [case.slot(bi, ph) for ph in s.phases]
            redispatch.append((k, slots, s.p_set))
    vmag = getattr(scenarios, "pv_magnitude", None)
    pv_rows = [] if vmag is None else [
        k for k, b in enumerate(case.buses) if b.type == PV
    ]

    def case_for(i):
        if not pv_rows:
            return case
        buses = list(case.buses)
        for k in pv_rows:
            buses[k] = replace(buses[k], v_set=float(vmag[i, k]))
        return replace(case, buses=tuple(buses))

    def solve_one(i):
        p_l, q_l = _scale_loads(p_base, q_base, scenarios.multipliers[i], pc)
        for k, slots, base_set in redispatch:
            d = power[i, k] - base_set
            for sl in slots:
                p_l[sl] -= d
        try:
            sol = acpf.newton_raphson_pf(
                case_for(i), (p_l, q_l), adm=adm, tol=tol,
                max_iter=max_iter, x0=base.x
            )
        except acpf.NonConvergenceError:
            return None
        return sol

    count = len(scenarios.scenario_ids)
    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            solutions = list(pool.map(solve_one, range(count)))
    else:
        solutions = [solve_one(i) for i in range(count)]

    kept = [i for i, s in enumerate(solutions) if s is not None]
    nbr = len(case.branches)
    m = len(kept)
    x = np.empty((m, case.nv))
    p_bus = np.empty((m, n * pc))
    q_bus = np.empty((m, n * pc))
    p_ij = np.empty((m, nbr * pc))
    q_ij = np.empty((m, nbr * pc))
    p_ji = np.empty((m, nbr * pc))
    q_ji = np.empty((m, nbr * pc))
    for row, i in enumerate(kept):
        sol = solutions[i]
        x[row] = sol.x
        p_bus[row] = sol.p
        q_bus[row] = sol.q
        for k, ba in enumerate(adm.branches):
            pij, qij, pji, qji = acpf.eval_line_flows(sol.x, ba)
            sl = slice(k * pc, (k + 1) * pc)
            p_ij[row, sl] = pij
            q_ij[row, sl] = qij
            p_ji[row, sl] = pji
            q_ji[row, sl] = qji

    return Dataset(
        case_fingerprint=case_fingerprint(case),
        phase_count=pc,
        bus_ids=tuple(b.id for b in case.buses),
        seed=scenarios.seed,
        lo=scenarios.lo,
        hi=scenarios.hi,
        pf_tol=tol,
        dropped=count - m,
        scenario_ids=scenarios.scenario_ids[kept],
        multipliers=scenarios.multipliers[kept],
        x=x,
        p_bus=p_bus,
        q_bus=q_bus,
        p_ij=p_ij,
        q_ij=q_ij,
        p_ji=p_ji,
        q_ji=q_ji,
    )


def split_train_test(dataset, fraction=0.5, seed=0):
    """Disjoint (train, test) split; row order inside each follows scenario id."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be strictly between 0 and 1")
    m = dataset.count
    perm = np.random.default_rng([seed, m]).permutation(m)
    k = int(round(fraction * m))
    train_rows = np.sort(perm[:k])
    test_rows = np.sort(perm[k:])
    return dataset.subset(train_rows), dataset.subset(test_rows)


# ---------------------------------------------------------------------------
# CSV persistence

def _phase_label(base, ph, pc):
    return f"{base}_{PHASES[ph]}" if pc == 3 else f"{base}"


def _column_labels(ds):
    labels = ["scenario_id"]
    labels += [f"mult_bus_{b}" for b in ds.bus_ids]
    labels += [f"x_{k + 1}" for k in range(ds.x.shape[1])]
    for kind in ("p", "q"):
        for b in ds.bus_ids:
            for ph in range(ds.phase_count):
                labels.append(_phase_label(f"{kind}_{b}", ph, ds.phase_count))
    for kind in ("pij", "qij", "pji", "qji"):
        for k in range(ds.branch_count):
            for ph in range(ds.phase_count):
                labels.append(_phase_label(f"{kind}_{k + 1}", ph, ds.phase_count))
    return labels


def _bus_cols_slot_order(ds, arr):
    """Reorder (m, n*pc) slot-ordered columns to bus-major csv order."""
    n, pc = ds.n, ds.phase_count
    order = [ph * n + k for k in range(n) for ph in range(pc)]
    return arr[:, order]


def write_dataset(dataset, path):
    """Write the dataset as annotated CSV; reruns are byte-identical."""
    buf = io.StringIO()
    buf.write(f"# case_fingerprint={dataset.case_fingerprint}\n")
    buf.write(f"# phase_count={dataset.phase_count}\n")
    buf.write(f"# seed={dataset.seed}\n")
    buf.write(f"# range={dataset.lo!r},{dataset.hi!r}\n")
    buf.write(f"# pf_tol={dataset.pf_tol!r}\n")
    buf.write(f"# dropped={dataset.dropped}\n")
    buf.write(",".join(_column_labels(dataset)) + "\n")
    blocks = [
        dataset.multipliers,
        dataset.x,
        _bus_cols_slot_order(dataset, dataset.p_bus),
        _bus_cols_slot_order(dataset, dataset.q_bus),
        dataset.p_ij,
        dataset.q_ij,
        dataset.p_ji,
        dataset.q_ji,
    ]
    wide = np.hstack(blocks)
    for row in range(dataset.count):
        buf.write(str(int(dataset.scenario_ids[row])))
        buf.write(",")
        buf.write(",".join(repr(float(v)) for v in wide[row]))
        buf.write("\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _parse_header_line(line, key):
    prefix = f"# {key}="
    if not line.startswith(prefix):
        raise ValueError(f"dataset header: expected {prefix!r}, got {line!r}")
    return line[len(prefix):].strip()


def read_dataset(path, case=None):
    """Read a dataset written by write_dataset.

    When `case` is given, a fingerprint mismatch emits a warning (the
    data stays usable for inspection, but models trained on it will not
    transfer).
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 7:
        raise ValueError("dataset file too short")
    fp = _parse_header_line(lines[0], "case_fingerprint")
    pc = int(_parse_header_line(lines[1], "phase_count"))
    seed = int(_parse_header_line(lines[2], "seed"))
    lo_s, hi_s = _parse_header_line(lines[3], "range").split(",")
    pf_tol = float(_parse_header_line(lines[4], "pf_tol"))
    dropped = int(_parse_header_line(lines[5], "dropped"))
    labels = lines[6].split(",")

    if case is not None and case_fingerprint(case) != fp:
        warnings.warn(
            "dataset was generated from a different case (fingerprint mismatch)",
            stacklevel=2,
        )

    bus_ids = tuple(
        int(lbl[len("mult_bus_"):]) for lbl in labels if lbl.startswith("mult_bus_")
    )
    n = len(bus_ids)
    nv = sum(1 for lbl in labels if lbl.startswith("x_"))
    nbr = sum(1 for lbl in labels if lbl.startswith("pij_")) // pc

    rows = [line.split(",") for line in lines[7:] if line]
    m = len(rows)
    ids = np.array([int(r[0]) for r in rows], dtype=int)
    data = np.array([[float(v) for v in r[1:]] for r in rows]) if m else np.zeros((0, len(labels) - 1))

    def take(width, start):
        return data[:, start:start + width], start + width

    pos = 0
    mult, pos = take(n, pos)
    x, pos = take(nv, pos)
    p_csv, pos = take(n * pc, pos)
    q_csv, pos = take(n * pc, pos)
    p_ij, pos = take(nbr * pc, pos)
    q_ij, pos = take(nbr * pc, pos)
    p_ji, pos = take(nbr * pc, pos)
    q_ji, pos = take(nbr * pc, pos)
    if pos != data.shape[1] and m:
        raise ValueError("dataset file has unexpected column count")

    # csv stores bus columns bus-major; flip back to slot order
    slot_of_csv_col = [ph * n + k for k in range(n) for ph in range(pc)]
    p_bus = np.empty_like(p_csv)
    q_bus = np.empty_like(q_csv)
    p_bus[:, slot_of_csv_col] = p_csv
    q_bus[:, slot_of_csv_col] = q_csv

    return Dataset(
        case_fingerprint=fp,
        phase_count=pc,
        bus_ids=bus_ids,
        seed=seed,
        lo=float(lo_s),
        hi=float(hi_s),
        pf_tol=pf_tol,
        dropped=dropped,
        scenario_ids=ids,
        multipliers=mult,
        x=x,
        p_bus=p_bus,
        q_bus=q_bus,
        p_ij=p_ij,
        q_ij=q_ij,
        p_ji=p_ji,
        q_ji=q_ji,
    )
