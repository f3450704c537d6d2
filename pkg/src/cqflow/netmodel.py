"""Network cases: parsing, validation, admittance construction.

Loads, shunts, impedances and limits are held in per unit on base_mva.
Cost coefficients are the one exception: they stay in physical-MW terms
(c1 in $/MWh, c2 in $/MW^2h) until an optimization problem is
assembled. See docs/case-format.md for the file formats.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

PHASES = ("a", "b", "c")

SLACK = "slack"
PV = "PV"
PQ = "PQ"
_BUS_TYPES = (SLACK, PV, PQ)


class CaseError(ValueError):
    """Base class for case-file problems."""


class CaseSyntaxError(CaseError):
    """Malformed case text. Carries a line number when one is known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CaseSemanticError(CaseError):
    """Structurally valid text describing an invalid network."""


def _as_float_tuple(values):
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    p_load: tuple  # per phase, p.u.
    q_load: tuple
    g_shunt: float = 0.0  # per phase, p.u.
    b_shunt: float = 0.0
    v_set: float = 1.0
    v_max: float = math.inf
    v_min: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    # phase impedance matrix, z[p][g] = (r, x); 1x1 for single-phase cases
    z: tuple
    b_charge: float = 0.0  # total charging per phase; half at each end
    s_max: float | None = None  # p.u.; None = unrated
    tap: float = 1.0


@dataclass(frozen=True)
class Source:
    bus: int
    phases: tuple  # phase indices, subset of (0, 1, 2)
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    c0: float = 0.0  # $/h
    c1: float = 0.0  # $/MWh
    c2: float = 0.0  # $/MW^2h
    p_set: float = 0.0  # base-case injection per phase, p.u.
    q_set: float = 0.0
    pf_min: float | None = None


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    phase_count: int
    buses: tuple
    branches: tuple
    sources: tuple

    def __post_init__(self):
        _validate_case(self)

    # -- index helpers ---------------------------------------------------

    @property
    def n(self):
        return len(self.buses)

    @property
    def nv(self):
        """Length of the voltage component vector X."""
        return 2 * self.n * self.phase_count

    def bus_index(self, bus_id):
        try:
            return self._index_map()[bus_id]
        except KeyError:
            raise CaseSemanticError(f"unknown bus id {bus_id}") from None

    def _index_map(self):
        m = getattr(self, "_idx_cache", None)
        if m is None:
            m = {b.id: k for k, b in enumerate(self.buses)}
            object.__setattr__(self, "_idx_cache", m)
        return m

    @property
    def slack_index(self):
        for k, b in enumerate(self.buses):
            if b.type == SLACK:
                return k
        raise CaseSemanticError("no slack bus")

    def slot(self, bus_index, phase):
        """Position of a (bus, phase) node; X[2*slot] = e, X[2*slot+1] = f."""
        return phase * self.n + bus_index

    def sources_at(self, bus_id):
        return tuple(s for s in self.sources if s.bus == bus_id)

    def load_vectors(self):
        """Base (P_L, Q_L) per (bus, phase) slot, p.u."""
        n, pc = self.n, self.phase_count
        p = np.zeros(n * pc)
        q = np.zeros(n * pc)
        for k, b in enumerate(self.buses):
            for ph in range(pc):
                p[self.slot(k, ph)] = b.p_load[ph]
                q[self.slot(k, ph)] = b.q_load[ph]
        return p, q

    def source_set_vectors(self):
        """Base source injections per slot from p_set/q_set, p.u."""
        n, pc = self.n, self.phase_count
        p = np.zeros(n * pc)
        q = np.zeros(n * pc)
        for s in self.sources:
            k = self.bus_index(s.bus)
            for ph in s.phases:
                p[self.slot(k, ph)] += s.p_set
                q[self.slot(k, ph)] += s.q_set
        return p, q


def _validate_case(case):
    if not case.base_mva > 0:
        raise CaseSemanticError(f"base_mva must be positive, got {case.base_mva}")
    if case.phase_count not in (1, 3):
        raise CaseSemanticError(f"phase_count must be 1 or 3, got {case.phase_count}")
    if not case.buses:
        raise CaseSemanticError("case has no buses")
    pc = case.phase_count

    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise CaseSemanticError(f"duplicate bus id(s): {dup}")
    id_set = set(ids)

    n_slack = sum(1 for b in case.buses if b.type == SLACK)
    if n_slack != 1:
        raise CaseSemanticError(f"exactly one slack bus required, found {n_slack}")

    for b in case.buses:
        if b.type not in _BUS_TYPES:
            raise CaseSemanticError(f"bus {b.id}: unknown type {b.type!r}")
        if len(b.p_load) != pc or len(b.q_load) != pc:
            raise CaseSemanticError(
                f"bus {b.id}: load tuples must have {pc} entries"
            )
        if not (b.v_min <= b.v_max):
            raise CaseSemanticError(f"bus {b.id}: v_min > v_max")
        if b.type in (SLACK, PV) and not (b.v_set > 0 and math.isfinite(b.v_set)):
            raise CaseSemanticError(f"bus {b.id}: invalid voltage setpoint {b.v_set}")

    for k, br in enumerate(case.branches):
        if br.from_bus not in id_set or br.to_bus not in id_set:
            raise CaseSemanticError(
                f"branch {k} ({br.from_bus}-{br.to_bus}) references a missing bus"
            )
        if br.from_bus == br.to_bus:
            raise CaseSemanticError(f"branch {k}: from and to bus are both {br.from_bus}")
        z = br.z
        if len(z) != pc or any(len(row) != pc for row in z):
            raise CaseSemanticError(f"branch {k}: impedance matrix must be {pc}x{pc}")
        for p in range(pc):
            for g in range(pc):
                if len(z[p][g]) != 2:
                    raise CaseSemanticError(f"branch {k}: impedance entries are (r, x) pairs")
                if z[p][g] != z[g][p]:
                    raise CaseSemanticError(
                        f"branch {k}: phase impedance matrix is not symmetric"
                    )
        if not br.tap > 0:
            raise CaseSemanticError(f"branch {k}: tap must be positive, got {br.tap}")
        if pc == 3 and br.tap != 1.0:
            raise CaseSemanticError(f"branch {k}: off-nominal taps unsupported on three-phase branches")
        if br.s_max is not None and not br.s_max > 0:
            raise CaseSemanticError(f"branch {k}: s_max must be positive or None")

    for j, s in enumerate(case.sources):
        if s.bus not in id_set:
            raise CaseSemanticError(f"source {j} references missing bus {s.bus}")
        if not s.phases or any(ph not in range(pc) for ph in s.phases):
            raise CaseSemanticError(f"source {j}: invalid phase set {s.phases}")
        if len(set(s.phases)) != len(s.phases):
            raise CaseSemanticError(f"source {j}: repeated phases")
        if s.p_min > s.p_max or s.q_min > s.q_max:
            raise CaseSemanticError(f"source {j}: lower bound exceeds upper bound")
        if s.pf_min is not None and not (0 < s.pf_min <= 1):
            raise CaseSemanticError(f"source {j}: pf_min must be in (0, 1]")


# ---------------------------------------------------------------------------
# MATPOWER parsing

_MAT_NAME_RE = re.compile(r"function\s+mpc\s*=\s*(\w+)")
_MAT_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([^;%]+);")

# standard column counts; rows longer than this trigger the unknown-column warning
_STD_COLS = {"bus": 13, "gen": 21, "branch": 13}


def _matpower_tables(text):
    """Extract mpc.<name> = [...] tables with per-row line numbers."""
    tables = {}
    lines = text.splitlines()
    i = 0
    open_re = re.compile(r"mpc\.(\w+)\s*=\s*\[")
    while i < len(lines):
        stripped = lines[i].split("%", 1)[0]
        m = open_re.search(stripped)
        if not m or m.group(1) == "baseMVA":
            i += 1
            continue
        name = m.group(1)
        rows = []
        body = stripped[m.end():]
        j = i
        closed = False
        while j < len(lines):
            if j != i:
                body = lines[j].split("%", 1)[0]
            if "]" in body:
                body = body.split("]", 1)[0]
                closed = True
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                try:
                    rows.append(([float(t) for t in chunk.split()], j + 1))
                except ValueError:
                    raise CaseSyntaxError(
                        f"non-numeric value in mpc.{name} row: {chunk!r}", line=j + 1
                    ) from None
            if closed:
                break
            j += 1
        if not closed:
            raise CaseSyntaxError(f"unterminated mpc.{name} table", line=i + 1)
        tables[name] = rows
        i = j + 1
    return tables


def _require_cols(name, row, line, count):
    if len(row) < count:
        raise CaseSyntaxError(
            f"mpc.{name} row has {len(row)} columns, expected at least {count}",
            line=line,
        )


def parse_matpower_case(text, name=None):
    """Parse the supported subset of the MATPOWER case format.

    Returns a validated NetworkCase with loads and limits converted to
    per unit. Raises CaseSyntaxError (with a line number) for malformed
    text and CaseSemanticError for invalid network data.
    """
    m = _MAT_SCALAR_RE.search(text)
    if not m:
        raise CaseSyntaxError("missing mpc.baseMVA")
    try:
        base = float(m.group(1))
    except ValueError:
        raise CaseSyntaxError(f"bad baseMVA value {m.group(1)!r}") from None

    if name is None:
        nm = _MAT_NAME_RE.search(text)
        name = nm.group(1) if nm else "case"

    tables = _matpower_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseSyntaxError(f"missing mpc.{required} table")

    unknown_cols = set()
    ignored_angle_limits = 0
    dropped = []

    buses = []
    v_set_by_bus = {}
    bus_type_by_id = {}
    for row, line in tables["bus"]:
        _require_cols("bus", row, line, 13)
        if len(row) > _STD_COLS["bus"]:
            unknown_cols.add("bus")
        bid = int(row[0])
        btype = {1: PQ, 2: PV, 3: SLACK}.get(int(row[1]))
        if btype is None:
            raise CaseSemanticError(f"bus {bid}: unsupported bus type {int(row[1])}")
        bus_type_by_id[bid] = btype
        buses.append(
            dict(
                id=bid,
                type=btype,
                p_load=(row[2] / base,),
                q_load=(row[3] / base,),
                g_shunt=row[4] / base,
                b_shunt=row[5] / base,
                v_max=row[11],
                v_min=row[12],
            )
        )

    gencost = tables.get("gencost", [])
    gen_rows = tables["gen"]
    if gencost and len(gencost) != len(gen_rows):
        raise CaseSemanticError(
            f"gencost has {len(gencost)} rows for {len(gen_rows)} generators"
        )

    sources = []
    for gi, (row, line) in enumerate(gen_rows):
        _require_cols("gen", row, line, 10)
        if len(row) > _STD_COLS["gen"]:
            unknown_cols.add("gen")
        gbus = int(row[0])
        if int(row[7]) == 0:
            dropped.append(f"generator {gi} at bus {gbus}")
            continue
        c0 = c1 = c2 = 0.0
        if gencost:
            crow, cline = gencost[gi]
            _require_cols("gencost", crow, cline, 4)
            model, ncost = int(crow[0]), int(crow[3])
            if model != 2:
                raise CaseSemanticError(
                    f"gencost row {gi}: only polynomial cost model 2 is supported"
                )
            if len(crow) < 4 + ncost:
                raise CaseSyntaxError(
                    f"gencost row has {len(crow) - 4} coefficients, header says {ncost}",
                    line=cline,
                )
            coeffs = crow[4 : 4 + ncost]
            if ncost == 3:
                c2, c1, c0 = coeffs
            elif ncost == 2:
                c1, c0 = coeffs
            elif ncost == 1:
                (c0,) = coeffs
            else:
                raise CaseSemanticError(
                    f"gencost row {gi}: polynomial degree above 2 is unsupported"
                )
        sources.append(
            Source(
                bus=gbus,
                phases=(0,),
                p_min=row[9] / base,
                p_max=row[8] / base,
                q_min=row[4] / base,
                q_max=row[3] / base,
                c0=c0,
                c1=c1,
                c2=c2,
                p_set=row[1] / base,
                q_set=row[2] / base,
            )
        )
        v_set_by_bus.setdefault(gbus, row[5])

    branches = []
    for row, line in tables["branch"]:
        _require_cols("branch", row, line, 11)
        if len(row) > _STD_COLS["branch"]:
            unknown_cols.add("branch")
        if int(row[10]) == 0:
            dropped.append(f"branch {int(row[0])}-{int(row[1])}")
            continue
        if row[9] != 0.0:
            raise CaseSemanticError(
                f"branch {int(row[0])}-{int(row[1])}: phase-shifting transformers unsupported"
            )
        if len(row) >= 13 and (row[11] > -360 or row[12] < 360):
            ignored_angle_limits += 1
        tap = row[8] if row[8] != 0 else 1.0
        branches.append(
            Branch(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                z=(((row[2], row[3]),),),
                b_charge=row[4],
                s_max=(row[5] / base) if row[5] > 0 else None,
                tap=tap,
            )
        )

    bus_objs = []
    for b in buses:
        v_set = v_set_by_bus.get(b["id"], 1.0)
        bus_objs.append(Bus(v_set=v_set, **b))

    if unknown_cols:
        warnings.warn(
            f"ignoring unknown extra columns in table(s): {', '.join(sorted(unknown_cols))}",
            stacklevel=2,
        )
    if ignored_angle_limits:
        warnings.warn(
            f"{ignored_angle_limits} branch row(s) carry angle-difference limits; ignored",
            stacklevel=2,
        )
    if dropped:
        warnings.warn(
            f"dropped out-of-service rows: {'; '.join(dropped)}", stacklevel=2
        )

    return NetworkCase(
        name=name,
        base_mva=base,
        phase_count=1,
        buses=tuple(bus_objs),
        branches=tuple(branches),
        sources=tuple(sources),
    )


# ---------------------------------------------------------------------------
# JSON case schema

_PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}


def _phases_from_json(value, where):
    if isinstance(value, str):
        letters = list(value)
    elif isinstance(value, (list, tuple)):
        letters = [str(v) for v in value]
    else:
        raise CaseSyntaxError(f"{where}: phases must be a string or list")
    try:
        return tuple(_PHASE_INDEX[p] for p in letters)
    except KeyError:
        raise CaseSyntaxError(f"{where}: unknown phase letter in {value!r}") from None


def _per_phase(value, pc, where):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if pc == 1:
            return (float(value),)
        raise CaseSyntaxError(f"{where}: expected {pc} per-phase entries")
    if isinstance(value, (list, tuple)):
        if len(value) != pc:
            raise CaseSyntaxError(f"{where}: expected {pc} per-phase entries")
        return _as_float_tuple(value)
    raise CaseSyntaxError(f"{where}: expected number or list")


_REQUIRED = object()


def _num(obj, key, where, default=_REQUIRED, allow_none=False, none_value=None):
    if key not in obj:
        if default is _REQUIRED:
            raise CaseSyntaxError(f"{where}: missing key {key!r}")
        return default
    v = obj[key]
    if v is None:
        if allow_none:
            return none_value
        raise CaseSyntaxError(f"{where}: {key} must be a number")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise CaseSyntaxError(f"{where}: {key} must be a number")
    return float(v)


_BUS_KEYS = {"id", "type", "p_load", "q_load", "g_shunt", "b_shunt", "v_set", "v_max", "v_min"}
_BRANCH_KEYS = {"from", "to", "r", "x", "z_phase", "b_charge", "s_max", "tap"}
_SOURCE_KEYS = {"bus", "phases", "p_min", "p_max", "q_min", "q_max",
                "c0", "c1", "c2", "p_set", "q_set", "pf_min"}


def _reject_unknown(obj, allowed, where):
    extra = set(obj) - allowed
    if extra:
        raise CaseSyntaxError(f"{where}: unknown key(s) {sorted(extra)}")


def parse_json_case(text):
    """Parse a native JSON case (single- or three-phase)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CaseSyntaxError("top level must be an object")
    _reject_unknown(doc, {"name", "base_mva", "phase_count", "buses", "branches", "sources"}, "case")

    try:
        pc = int(doc["phase_count"])
        base = float(doc["base_mva"])
    except KeyError as exc:
        raise CaseSyntaxError(f"missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError):
        raise CaseSyntaxError("base_mva and phase_count must be numbers") from None
    if pc not in (1, 3):
        raise CaseSemanticError(f"phase_count must be 1 or 3, got {pc}")
    name = str(doc.get("name", "case"))

    buses = []
    for bd in doc.get("buses", []):
        where = f"bus {bd.get('id', '?')}"
        _reject_unknown(bd, _BUS_KEYS, where)
        if "id" not in bd or "type" not in bd:
            raise CaseSyntaxError(f"{where}: id and type are required")
        buses.append(
            Bus(
                id=int(bd["id"]),
                type=str(bd["type"]),
                p_load=_per_phase(bd.get("p_load", 0.0), pc, where),
                q_load=_per_phase(bd.get("q_load", 0.0), pc, where),
                g_shunt=_num(bd, "g_shunt", where, default=0.0),
                b_shunt=_num(bd, "b_shunt", where, default=0.0),
                v_set=_num(bd, "v_set", where, default=1.0),
                v_max=_num(bd, "v_max", where, default=math.inf, allow_none=True, none_value=math.inf),
                v_min=_num(bd, "v_min", where, default=0.0, allow_none=True, none_value=0.0),
            )
        )

    branches = []
    for k, rd in enumerate(doc.get("branches", [])):
        where = f"branch {k}"
        _reject_unknown(rd, _BRANCH_KEYS, where)
        if "from" not in rd or "to" not in rd:
            raise CaseSyntaxError(f"{where}: from and to are required")
        if pc == 1:
            if "z_phase" in rd:
                raise CaseSyntaxError(f"{where}: z_phase is for three-phase cases; use r and x")
            z = (((_num(rd, "r", where), _num(rd, "x", where)),),)
        else:
            zp = rd.get("z_phase")
            if zp is None:
                raise CaseSyntaxError(f"{where}: three-phase branches need z_phase")
            if (
                not isinstance(zp, list)
                or len(zp) != 3
                or any(not isinstance(rw, list) or len(rw) != 3 for rw in zp)
            ):
                raise CaseSyntaxError(f"{where}: z_phase must be a 3x3 array of [r, x] pairs")
            try:
                z = tuple(
                    tuple((float(cell[0]), float(cell[1])) for cell in rw) for rw in zp
                )
            except (TypeError, IndexError, ValueError):
                raise CaseSyntaxError(f"{where}: z_phase entries must be [r, x] pairs") from None
        branches.append(
            Branch(
                from_bus=int(rd["from"]),
                to_bus=int(rd["to"]),
                z=z,
                b_charge=_num(rd, "b_charge", where, default=0.0),
                s_max=_num(rd, "s_max", where, default=None, allow_none=True, none_value=None),
                tap=_num(rd, "tap", where, default=1.0),
            )
        )

    sources = []
    for j, sd in enumerate(doc.get("sources", [])):
        where = f"source {j}"
        _reject_unknown(sd, _SOURCE_KEYS, where)
        if "bus" not in sd:
            raise CaseSyntaxError(f"{where}: bus is required")
        phases = _phases_from_json(sd.get("phases", "a"), where)
        sources.append(
            Source(
                bus=int(sd["bus"]),
                phases=phases,
                p_min=_num(sd, "p_min", where, allow_none=True, none_value=-math.inf),
                p_max=_num(sd, "p_max", where, allow_none=True, none_value=math.inf),
                q_min=_num(sd, "q_min", where, allow_none=True, none_value=-math.inf),
                q_max=_num(sd, "q_max", where, allow_none=True, none_value=math.inf),
                c0=_num(sd, "c0", where, default=0.0),
                c1=_num(sd, "c1", where, default=0.0),
                c2=_num(sd, "c2", where, default=0.0),
                p_set=_num(sd, "p_set", where, default=0.0),
                q_set=_num(sd, "q_set", where, default=0.0),
                pf_min=_num(sd, "pf_min", where, default=None, allow_none=True, none_value=None),
            )
        )

    return NetworkCase(
        name=name,
        base_mva=base,
        phase_count=pc,
        buses=tuple(buses),
        branches=tuple(branches),
        sources=tuple(sources),
    )


def _json_limit(v):
    return None if (v is not None and math.isinf(v)) else v


def render_json_case(case):
    """Canonical JSON rendering; parse_json_case(render_json_case(c)) == c."""
    pc = case.phase_count

    def per_phase(t):
        return t[0] if pc == 1 else list(t)

    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "phase_count": pc,
        "buses": [
            {
                "id": b.id,
                "type": b.type,
                "p_load": per_phase(b.p_load),
                "q_load": per_phase(b.q_load),
                "g_shunt": b.g_shunt,
                "b_shunt": b.b_shunt,
                "v_set": b.v_set,
                "v_max": _json_limit(b.v_max),
                "v_min": _json_limit(b.v_min),
            }
            for b in case.buses
        ],
        "branches": [],
        "sources": [
            {
                "bus": s.bus,
                "phases": "".join(PHASES[p] for p in s.phases),
                "p_min": _json_limit(s.p_min),
                "p_max": _json_limit(s.p_max),
                "q_min": _json_limit(s.q_min),
                "q_max": _json_limit(s.q_max),
                "c0": s.c0,
                "c1": s.c1,
                "c2": s.c2,
                "p_set": s.p_set,
                "q_set": s.q_set,
                "pf_min": s.pf_min,
            }
            for s in case.sources
        ],
    }
    for br in case.branches:
        rd = {"from": br.from_bus, "to": br.to_bus}
        if pc == 1:
            rd["r"], rd["x"] = br.z[0][0]
        else:
            rd["z_phase"] = [[list(cell) for cell in row] for row in br.z]
        rd["b_charge"] = br.b_charge
        rd["s_max"] = br.s_max
        rd["tap"] = br.tap
        doc["branches"].append(rd)
    return json.dumps(doc, indent=1)


def case_fingerprint(case):
    """Hex digest identifying the case data (16 chars)."""
    return hashlib.sha256(render_json_case(case).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# balanced three-phase <-> single-phase equivalents

def balanced_three_phase(case):
    """Replicate a single-phase case into a balanced three-phase case.

    Each phase carries the same per-unit loads, bounds and setpoints as
    the single-phase case, so the per-phase solution of the result
    equals the single-phase solution. Source cost coefficients are
    divided by 3 because the three-phase objective sums over phases.
    """
    if case.phase_count != 1:
        raise CaseSemanticError("balanced_three_phase expects a single-phase case")
    zero = (0.0, 0.0)
    buses = tuple(
        Bus(
            id=b.id,
            type=b.type,
            p_load=b.p_load * 3,
            q_load=b.q_load * 3,
            g_shunt=b.g_shunt,
            b_shunt=b.b_shunt,
            v_set=b.v_set,
            v_max=b.v_max,
            v_min=b.v_min,
        )
        for b in case.buses
    )
    branches = tuple(
        Branch(
            from_bus=br.from_bus,
            to_bus=br.to_bus,
            z=(
                (br.z[0][0], zero, zero),
                (zero, br.z[0][0], zero),
                (zero, zero, br.z[0][0]),
            ),
            b_charge=br.b_charge,
            s_max=br.s_max,
            tap=br.tap,
        )
        for br in case.branches
    )
    sources = tuple(
        Source(
            bus=s.bus,
            phases=(0, 1, 2),
            p_min=s.p_min,
            p_max=s.p_max,
            q_min=s.q_min,
            q_max=s.q_max,
            c0=s.c0 / 3.0,
            c1=s.c1 / 3.0,
            c2=s.c2 / 3.0,
            p_set=s.p_set,
            q_set=s.q_set,
            pf_min=s.pf_min,
        )
        for s in case.sources
    )
    return NetworkCase(
        name=case.name + "-3ph",
        base_mva=case.base_mva,
        phase_count=3,
        buses=buses,
        branches=branches,
        sources=sources,
    )


def single_phase_equivalent(case):
    """Collapse a balanced three-phase case to its single-phase model.

    Requires exact balance: diagonal phase impedance matrices with equal
    diagonals, per-phase loads equal, and every source spanning all
    three phases. Cost coefficients are multiplied by 3 (inverse of
    balanced_three_phase).
    """
    if case.phase_count != 3:
        raise CaseSemanticError("single_phase_equivalent expects a three-phase case")

    def balanced3(t, what):
        if not (t[0] == t[1] == t[2]):
            raise CaseSemanticError(f"case is not balanced: {what} differs across phases")
        return (t[0],)

    buses = []
    for b in case.buses:
        buses.append(
            Bus(
                id=b.id,
                type=b.type,
                p_load=balanced3(b.p_load, f"bus {b.id} p_load"),
                q_load=balanced3(b.q_load, f"bus {b.id} q_load"),
                g_shunt=b.g_shunt,
                b_shunt=b.b_shunt,
                v_set=b.v_set,
                v_max=b.v_max,
                v_min=b.v_min,
            )
        )
    branches = []
    for k, br in enumerate(case.branches):
        for p in range(3):
            for g in range(3):
                if p != g and br.z[p][g] != (0.0, 0.0):
                    raise CaseSemanticError(
                        f"case is not balanced: branch {k} has mutual coupling"
                    )
        diag = balanced3(tuple(br.z[p][p] for p in range(3)), f"branch {k} impedance")
        branches.append(
            Branch(
                from_bus=br.from_bus,
                to_bus=br.to_bus,
                z=((diag[0],),),
                b_charge=br.b_charge,
                s_max=br.s_max,
                tap=br.tap,
            )
        )
    sources = []
    for j, s in enumerate(case.sources):
        if tuple(sorted(s.phases)) != (0, 1, 2):
            raise CaseSemanticError(
                f"case is not balanced: source {j} does not span all phases"
            )
        sources.append(
            Source(
                bus=s.bus,
                phases=(0,),
                p_min=s.p_min,
                p_max=s.p_max,
                q_min=s.q_min,
                q_max=s.q_max,
                c0=s.c0 * 3.0,
                c1=s.c1 * 3.0,
                c2=s.c2 * 3.0,
                p_set=s.p_set,
                q_set=s.q_set,
                pf_min=s.pf_min,
            )
        )
    name = case.name[:-4] if case.name.endswith("-3ph") else case.name + "-1ph"
    return NetworkCase(
        name=name,
        base_mva=case.base_mva,
        phase_count=1,
        buses=tuple(buses),
        branches=tuple(branches),
        sources=tuple(sources),
    )


# ---------------------------------------------------------------------------
# admittance construction

@dataclass(frozen=True, eq=False)
class BranchAdmittance:
    """Two-port admittance blocks of one branch, (pc x pc) each.

    Carries the network dimensions so flow evaluation can locate the
    terminal (bus, phase) slots without the full matrix at hand.
    """

    from_index: int
    to_index: int
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    n: int
    phase_count: int

    def terminal_slots(self):
        """Global slots of the from and to nodes, one row per phase."""
        ph = np.arange(self.phase_count) * self.n
        return ph + self.from_index, ph + self.to_index


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Bus admittance matrix over (bus, phase) slots.

    Slot order: slot(i, phase) = phase * n + i, matching the voltage
    vector layout X[2*slot] = e, X[2*slot + 1] = f. G is y.real and B is
    y.imag.
    """

    n: int
    phase_count: int
    y: np.ndarray
    branches: tuple
    bus_ids: tuple

    @property
    def size(self):
        return self.n * self.phase_count

    def bus_index(self, bus_id):
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise CaseSemanticError(f"unknown bus id {bus_id}") from None

    def block(self, i, j):
        """(pc x pc) admittance block between buses with indices i, j."""
        n, pc = self.n, self.phase_count
        idx = np.arange(pc)
        return self.y[np.ix_(idx * n + i, idx * n + j)]


def _branch_series_admittance(branch, pc):
    z = np.array(
        [[complex(branch.z[p][g][0], branch.z[p][g][1]) for g in range(pc)] for p in range(pc)]
    )
    if pc == 1:
        if z[0, 0] == 0:
            raise CaseSemanticError(
                f"branch {branch.from_bus}-{branch.to_bus}: zero series impedance"
            )
        return np.array([[1.0 / z[0, 0]]])
    if np.all(z[~np.eye(pc, dtype=bool)] == 0):
        # uncoupled phases invert elementwise, bit-identical to the
        # single-phase path for balanced replicas
        if np.any(z.diagonal() == 0):
            raise CaseSemanticError(
                f"branch {branch.from_bus}-{branch.to_bus}: zero series impedance"
            )
        return np.diag(1.0 / z.diagonal())
    det = np.linalg.det(z)
    if abs(det) < 1e-14:
        raise CaseSemanticError(
            f"branch {branch.from_bus}-{branch.to_bus}: singular phase impedance matrix"
        )
    ys = np.linalg.inv(z)
    return (ys + ys.T) / 2.0  # z is symmetric; keep its inverse exactly so


def build_admittance(case):
    """Assemble the bus admittance matrix and per-branch two-port blocks."""
    n, pc = case.n, case.phase_count
    size = n * pc
    y = np.zeros((size, size), dtype=complex)
    eye = np.eye(pc)
    branch_adm = []

    for br in case.branches:
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        ys = _branch_series_admittance(br, pc)
        ysh = 1j * (br.b_charge / 2.0) * eye
        t = br.tap
        yff = (ys + ysh) / (t * t)
        yft = -ys / t
        ytf = -ys / t
        ytt = ys + ysh
        for blk in (yff, yft, ytf, ytt):
            blk.setflags(write=False)
        branch_adm.append(BranchAdmittance(i, j, yff, yft, ytf, ytt, n, pc))

        fi = np.arange(pc) * n + i
        ti = np.arange(pc) * n + j
        y[np.ix_(fi, fi)] += yff
        y[np.ix_(fi, ti)] += yft
        y[np.ix_(ti, fi)] += ytf
        y[np.ix_(ti, ti)] += ytt

    for k, b in enumerate(case.buses):
        ysh = complex(b.g_shunt, b.b_shunt)
        for ph in range(pc):
            s = ph * n + k
            y[s, s] += ysh

    y.setflags(write=False)
    return AdmittanceMatrix(
        n=n,
        phase_count=pc,
        y=y,
        branches=tuple(branch_adm),
        bus_ids=tuple(b.id for b in case.buses),
    )
