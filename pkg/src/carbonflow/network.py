"""Network case data model, case-file ingestion, and the linearized AC
power-flow constraint builder.

Case files store MW quantities; branch equations convert through the
100 MVA per-unit base internally.  A loaded :class:`NetworkCase` is
immutable and safe to share.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .milp import EQ, GE, INF, LE, MilpModel

BASE_MVA = 100.0


class CaseError(ValueError):
    """Base class for case-file problems."""


class CaseParseError(CaseError):
    """The file does not match the documented schema."""


class CaseValidationError(CaseError):
    """The parsed case breaks a semantic invariant."""


@dataclass(frozen=True)
class Bus:
    id: str
    v_min: float
    v_max: float


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    g: float            # series conductance, p.u.
    b: float            # series susceptance, p.u.
    flow_limit: float   # MW


@dataclass(frozen=True)
class Generator:
    bus: str
    p_min: float
    p_max: float
    ramp_up: float
    ramp_down: float
    cost_a: float       # $/MW^2 h
    cost_b: float       # $/MWh
    cost_c: float       # $/h
    reserve_cost: float  # $/MW h
    gci: float          # tCO2/MWh

    def cost(self, p: float) -> float:
        return self.cost_a * p * p + self.cost_b * p + self.cost_c


@dataclass(frozen=True)
class Renewable:
    bus: str
    kind: str           # "PV" or "WP"
    capacity: float     # MW
    profile: tuple[float, ...]  # fraction of capacity per period

    def available(self, t: int) -> float:
        return self.capacity * self.profile[t]


@dataclass(frozen=True)
class Load:
    bus: str
    profile: tuple[float, ...]  # MW nominal per period
    alpha: float        # $/MWh marginal utility at zero consumption
    beta: float         # $/MW^2 h curvature
    power_factor: float

    def utility(self, p: float) -> float:
        sat = self.alpha / (2.0 * self.beta)
        if p >= sat:
            return self.alpha ** 2 / (4.0 * self.beta)
        return self.alpha * p - self.beta * p * p

    @property
    def tan_phi(self) -> float:
        return math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class Storage:
    bus: str
    psi_min: float
    psi_max: float
    p_cha_max: float
    p_dis_max: float
    eta_ch: float
    eta_dis: float
    deg_price: float    # $/MWh
    leak_rate: float    # fraction of stored energy lost per period
    psi0: float         # MWh
    e0: float           # tCO2/MWh


@dataclass(frozen=True)
class NetworkCase:
    name: str
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    renewables: tuple[Renewable, ...]
    loads: tuple[Load, ...]
    storages: tuple[Storage, ...]
    horizon: int
    dt: float
    _bus_index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bus_index",
                           {bus.id: i for i, bus in enumerate(self.buses)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus_id: str) -> int:
        try:
            return self._bus_index[bus_id]
        except KeyError:
            raise CaseValidationError(f"unknown bus id {bus_id!r}") from None

    @property
    def load_buses(self) -> list[int]:
        return [self.bus_index(d.bus) for d in self.loads]

    @property
    def storage_buses(self) -> list[int]:
        return [self.bus_index(s.bus) for s in self.storages]

    @property
    def max_gci(self) -> float:
        return max((g.gci for g in self.generators), default=0.0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "horizon": self.horizon,
            "dt": self.dt,
            "buses": [{"id": b.id, "v_min": b.v_min, "v_max": b.v_max} for b in self.buses],
            "branches": [{"from": br.from_bus, "to": br.to_bus, "g": br.g, "b": br.b,
                          "flow_limit": br.flow_limit} for br in self.branches],
            "generators": [{"bus": g.bus, "p_min": g.p_min, "p_max": g.p_max,
                            "ramp_up": g.ramp_up, "ramp_down": g.ramp_down,
                            "cost_a": g.cost_a, "cost_b": g.cost_b, "cost_c": g.cost_c,
                            "reserve_cost": g.reserve_cost, "gci": g.gci}
                           for g in self.generators],
            "renewables": [{"bus": r.bus, "kind": r.kind, "capacity": r.capacity,
                            "profile": list(r.profile)} for r in self.renewables],
            "loads": [{"bus": d.bus, "profile": list(d.profile), "alpha": d.alpha,
                       "beta": d.beta, "power_factor": d.power_factor} for d in self.loads],
            "storages": [{"bus": s.bus, "psi_min": s.psi_min, "psi_max": s.psi_max,
                          "p_cha_max": s.p_cha_max, "p_dis_max": s.p_dis_max,
                          "eta_ch": s.eta_ch, "eta_dis": s.eta_dis,
                          "deg_price": s.deg_price, "leak_rate": s.leak_rate,
                          "psi0": s.psi0, "e0": s.e0} for s in self.storages],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ----------------------------------------------------------------------
# parsing and validation
# ----------------------------------------------------------------------

_TOP_KEYS = ("buses", "branches", "generators", "renewables", "loads",
             "storages", "horizon", "dt")


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise CaseParseError(f"missing field {key!r} in {where}")
    return record[key]


def _num(record: dict, key: str, where: str) -> float:
    val = _require(record, key, where)
    if not isinstance(val, (int, float)) or isinstance(val, bool) or not math.isfinite(val):
        raise CaseParseError(f"field {key!r} in {where} must be a finite number")
    return float(val)


def _profile(record: dict, key: str, where: str) -> tuple[float, ...]:
    val = _require(record, key, where)
    if not isinstance(val, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
            for v in val):
        raise CaseParseError(f"field {key!r} in {where} must be a list of finite numbers")
    return tuple(float(v) for v in val)


def case_from_dict(data: dict, name: str = "case") -> NetworkCase:
    if not isinstance(data, dict):
        raise CaseParseError("case file must contain a JSON object")
    for key in _TOP_KEYS:
        if key not in data:
            raise CaseParseError(f"missing top-level key {key!r}")
    horizon = data["horizon"]
    if not isinstance(horizon, int) or horizon < 1:
        raise CaseParseError("field 'horizon' must be a positive integer")
    dt = data["dt"]
    if not isinstance(dt, (int, float)) or dt <= 0:
        raise CaseParseError("field 'dt' must be a positive number")

    buses = tuple(
        Bus(str(_require(rec, "id", f"buses[{i}]")),
            _num(rec, "v_min", f"buses[{i}]"), _num(rec, "v_max", f"buses[{i}]"))
        for i, rec in enumerate(data["buses"]))
    branches = tuple(
        Branch(str(_require(rec, "from", f"branches[{i}]")),
               str(_require(rec, "to", f"branches[{i}]")),
               _num(rec, "g", f"branches[{i}]"), _num(rec, "b", f"branches[{i}]"),
               _num(rec, "flow_limit", f"branches[{i}]"))
        for i, rec in enumerate(data["branches"]))
    generators = tuple(
        Generator(str(_require(rec, "bus", f"generators[{i}]")),
                  _num(rec, "p_min", f"generators[{i}]"), _num(rec, "p_max", f"generators[{i}]"),
                  _num(rec, "ramp_up", f"generators[{i}]"), _num(rec, "ramp_down", f"generators[{i}]"),
                  _num(rec, "cost_a", f"generators[{i}]"), _num(rec, "cost_b", f"generators[{i}]"),
                  _num(rec, "cost_c", f"generators[{i}]"), _num(rec, "reserve_cost", f"generators[{i}]"),
                  _num(rec, "gci", f"generators[{i}]"))
        for i, rec in enumerate(data["generators"]))
    renewables = tuple(
        Renewable(str(_require(rec, "bus", f"renewables[{i}]")),
                  str(_require(rec, "kind", f"renewables[{i}]")),
                  _num(rec, "capacity", f"renewables[{i}]"),
                  _profile(rec, "profile", f"renewables[{i}]"))
        for i, rec in enumerate(data["renewables"]))
    loads = tuple(
        Load(str(_require(rec, "bus", f"loads[{i}]")),
             _profile(rec, "profile", f"loads[{i}]"),
             _num(rec, "alpha", f"loads[{i}]"), _num(rec, "beta", f"loads[{i}]"),
             _num(rec, "power_factor", f"loads[{i}]"))
        for i, rec in enumerate(data["loads"]))
    storages = tuple(
        Storage(str(_require(rec, "bus", f"storages[{i}]")),
                _num(rec, "psi_min", f"storages[{i}]"), _num(rec, "psi_max", f"storages[{i}]"),
                _num(rec, "p_cha_max", f"storages[{i}]"), _num(rec, "p_dis_max", f"storages[{i}]"),
                _num(rec, "eta_ch", f"storages[{i}]"), _num(rec, "eta_dis", f"storages[{i}]"),
                _num(rec, "deg_price", f"storages[{i}]"), _num(rec, "leak_rate", f"storages[{i}]"),
                _num(rec, "psi0", f"storages[{i}]"), _num(rec, "e0", f"storages[{i}]"))
        for i, rec in enumerate(data["storages"]))

    case = NetworkCase(str(data.get("name", name)), buses, branches, generators,
                       renewables, loads, storages, horizon, float(dt))
    validate_case(case)
    return case


def load_case(path) -> NetworkCase:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"not valid JSON: {exc}") from exc
    return case_from_dict(data, name=str(path))


def validate_case(case: NetworkCase) -> None:
    if not case.buses:
        raise CaseValidationError("case has no buses")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    for bus in case.buses:
        if bus.v_min > bus.v_max:
            raise CaseValidationError(f"bus {bus.id}: v_min > v_max")
    adj: dict[str, set[str]] = {b.id: set() for b in case.buses}
    for br in case.branches:
        if br.from_bus not in adj or br.to_bus not in adj:
            raise CaseValidationError(
                f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} is a self-loop")
        if br.flow_limit <= 0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus}: flow limit must be positive")
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    if case.n_bus > 1:
        seen = {case.buses[0].id}
        frontier = [case.buses[0].id]
        while frontier:
            nxt = frontier.pop()
            for other in adj[nxt]:
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        missing = [i for i in ids if i not in seen]
        if missing:
            raise CaseValidationError(f"disconnected bus {missing[0]!r}")
    for g in case.generators:
        case.bus_index(g.bus)
        if g.p_min > g.p_max:
            raise CaseValidationError(f"generator at {g.bus}: p_min > p_max")
        if g.ramp_up < 0 or g.ramp_down < 0:
            raise CaseValidationError(f"generator at {g.bus}: negative ramp limit")
        if g.gci < 0:
            raise CaseValidationError(f"generator at {g.bus}: negative carbon intensity")
    for r in case.renewables:
        case.bus_index(r.bus)
        if r.kind not in ("PV", "WP"):
            raise CaseValidationError(f"renewable at {r.bus}: kind must be PV or WP")
        if r.capacity < 0:
            raise CaseValidationError(f"renewable at {r.bus}: negative capacity")
        if len(r.profile) != case.horizon:
            raise CaseValidationError(
                f"renewable at {r.bus}: profile length {len(r.profile)} != horizon {case.horizon}")
        if any(v < 0 for v in r.profile):
            raise CaseValidationError(f"renewable at {r.bus}: negative profile entry")
    load_buses = set()
    for d in case.loads:
        case.bus_index(d.bus)
        if d.bus in load_buses:
            raise CaseValidationError(f"more than one load at bus {d.bus}")
        load_buses.add(d.bus)
        if len(d.profile) != case.horizon:
            raise CaseValidationError(
                f"load at {d.bus}: profile length {len(d.profile)} != horizon {case.horizon}")
        if any(v < 0 for v in d.profile):
            raise CaseValidationError(f"load at {d.bus}: negative demand")
        if d.alpha <= 0 or d.beta <= 0:
            raise CaseValidationError(f"load at {d.bus}: utility coefficients must be positive")
        if not (0 < d.power_factor <= 1):
            raise CaseValidationError(f"load at {d.bus}: power factor out of (0,1]")
    for s in case.storages:
        case.bus_index(s.bus)
        if s.psi_min > s.psi_max:
            raise CaseValidationError(f"storage at {s.bus}: psi_min > psi_max")
        if not (s.psi_min <= s.psi0 <= s.psi_max):
            raise CaseValidationError(f"storage at {s.bus}: psi0 outside [psi_min, psi_max]")
        if not (0 < s.eta_ch <= 1) or not (0 < s.eta_dis <= 1):
            raise CaseValidationError(f"storage at {s.bus}: efficiency out of (0,1]")
        if s.p_cha_max < 0 or s.p_dis_max < 0:
            raise CaseValidationError(f"storage at {s.bus}: negative power limit")
        if not (0 <= s.leak_rate < 1):
            raise CaseValidationError(f"storage at {s.bus}: leak rate out of [0,1)")
        if s.e0 < 0:
            raise CaseValidationError(f"storage at {s.bus}: negative initial intensity")


# ----------------------------------------------------------------------
# linearized AC power flow
# ----------------------------------------------------------------------

@dataclass
class PeriodVars:
    """Model variable indices for one scheduling period."""

    v: list[int]
    theta: list[int]
    p_flow: list[int]       # MW, oriented from->to
    q_flow: list[int]       # MVar
    p_gen: list[int]
    q_gen: list[int]
    p_renew: list[int]
    p_load: list[int]
    p_cha: list[int]
    p_dis: list[int]


def add_acpf_constraints(model: MilpModel, case: NetworkCase, t: int,
                         pv: PeriodVars) -> list[int]:
    """Add branch-flow definitions, nodal balances, and the angle reference.

    Voltage bounds are enforced through the variable bounds of ``pv.v``.
    Flow variables are in MW / MVar; voltage terms convert via BASE_MVA.
    """
    n = case.n_bus
    for name, seq, want in (("v", pv.v, n), ("theta", pv.theta, n),
                            ("p_flow", pv.p_flow, len(case.branches)),
                            ("q_flow", pv.q_flow, len(case.branches)),
                            ("p_gen", pv.p_gen, len(case.generators)),
                            ("q_gen", pv.q_gen, len(case.generators)),
                            ("p_renew", pv.p_renew, len(case.renewables)),
                            ("p_load", pv.p_load, len(case.loads)),
                            ("p_cha", pv.p_cha, len(case.storages)),
                            ("p_dis", pv.p_dis, len(case.storages))):
        if len(seq) != want:
            raise ValueError(f"period {t}: {name} has {len(seq)} handles, expected {want}")
        for idx in seq:
            model._check_var(idx)

    rows: list[int] = []
    p_bal: list[dict[int, float]] = [dict() for _ in range(n)]
    q_bal: list[dict[int, float]] = [dict() for _ in range(n)]

    def _acc(table, bus, idx, coef):
        table[bus][idx] = table[bus].get(idx, 0.0) + coef

    for k, br in enumerate(case.branches):
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        # P_ij = G(2V_i - 1) - G(V_i + V_j - 1) - B(th_i - th_j), scaled to MW
        rows.append(model.add_constr(
            {pv.p_flow[k]: 1.0,
             pv.v[i]: -BASE_MVA * br.g, pv.v[j]: BASE_MVA * br.g,
             pv.theta[i]: BASE_MVA * br.b, pv.theta[j]: -BASE_MVA * br.b},
            EQ, 0.0, name=f"pf_t{t}_k{k}"))
        # Q_ij = -B(2V_i - 1) + B(V_i + V_j - 1) - G(th_i - th_j)
        rows.append(model.add_constr(
            {pv.q_flow[k]: 1.0,
             pv.v[i]: BASE_MVA * br.b, pv.v[j]: -BASE_MVA * br.b,
             pv.theta[i]: BASE_MVA * br.g, pv.theta[j]: -BASE_MVA * br.g},
            EQ, 0.0, name=f"qf_t{t}_k{k}"))
        _acc(p_bal, i, pv.p_flow[k], 1.0)
        _acc(p_bal, j, pv.p_flow[k], -1.0)
        _acc(q_bal, i, pv.q_flow[k], 1.0)
        _acc(q_bal, j, pv.q_flow[k], -1.0)

    for g, gen in enumerate(case.generators):
        i = case.bus_index(gen.bus)
        _acc(p_bal, i, pv.p_gen[g], -1.0)
        _acc(q_bal, i, pv.q_gen[g], -1.0)
    for r, ren in enumerate(case.renewables):
        _acc(p_bal, case.bus_index(ren.bus), pv.p_renew[r], -1.0)
    for d, load in enumerate(case.loads):
        i = case.bus_index(load.bus)
        _acc(p_bal, i, pv.p_load[d], 1.0)
        _acc(q_bal, i, pv.p_load[d], load.tan_phi)
    for s, sto in enumerate(case.storages):
        i = case.bus_index(sto.bus)
        _acc(p_bal, i, pv.p_dis[s], -1.0)
        _acc(p_bal, i, pv.p_cha[s], 1.0)

    for i in range(n):
        rows.append(model.add_constr(p_bal[i], EQ, 0.0, name=f"pbal_t{t}_b{i}"))
        rows.append(model.add_constr(q_bal[i], EQ, 0.0, name=f"qbal_t{t}_b{i}"))
    rows.append(model.add_constr({pv.theta[0]: 1.0}, EQ, 0.0, name=f"thref_t{t}"))
    return rows


def eval_flows(case: NetworkCase, v: np.ndarray, theta: np.ndarray):
    """Evaluate branch flows (MW, MVar) from voltages; exactly the expressions
    used by :func:`add_acpf_constraints`."""
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if v.shape != (case.n_bus,) or theta.shape != (case.n_bus,):
        raise ValueError(f"expected vectors of length {case.n_bus}")
    p = np.empty(len(case.branches))
    q = np.empty(len(case.branches))
    for k, br in enumerate(case.branches):
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        p[k] = BASE_MVA * (br.g * (2.0 * v[i] - 1.0) - br.g * (v[i] + v[j] - 1.0)
                           - br.b * (theta[i] - theta[j]))
        q[k] = BASE_MVA * (-br.b * (2.0 * v[i] - 1.0) + br.b * (v[i] + v[j] - 1.0)
                           - br.g * (theta[i] - theta[j]))
    return p, q


# ----------------------------------------------------------------------
# dispatch state
# ----------------------------------------------------------------------

@dataclass
class DispatchState:
    """A full schedule in physical units; arrays are indexed [t, element]."""

    p_gen: np.ndarray       # (T, G) MW
    q_gen: np.ndarray       # (T, G) MVar
    p_renew: np.ndarray     # (T, R) MW injected
    curtailed: np.ndarray   # (T, R) MW spilled
    p_load: np.ndarray      # (T, D) MW
    p_cha: np.ndarray       # (T, S) MW
    p_dis: np.ndarray       # (T, S) MW
    mu_cha: np.ndarray      # (T, S) 0/1
    mu_dis: np.ndarray      # (T, S) 0/1
    psi: np.ndarray         # (T, S) MWh at end of period
    v: np.ndarray           # (T, N) p.u.
    theta: np.ndarray       # (T, N) rad
    p_flow: np.ndarray      # (T, K) MW
    q_flow: np.ndarray      # (T, K) MVar
    r_up: np.ndarray        # (T, G) MW
    r_dn: np.ndarray        # (T, G) MW

    def validate(self, case: NetworkCase, tol: float = 1e-9) -> None:
        T = case.horizon
        if self.p_gen.shape != (T, len(case.generators)):
            raise ValueError("p_gen shape mismatch")
        for t in range(T):
            for s in range(len(case.storages)):
                if self.mu_cha[t, s] + self.mu_dis[t, s] > 1 + 1e-9:
                    raise ValueError(f"storage {s} charges and discharges in period {t}")
            p, q = eval_flows(case, self.v[t], self.theta[t])
            if np.max(np.abs(p - self.p_flow[t]), initial=0.0) > tol * BASE_MVA:
                raise ValueError(f"period {t}: active flows inconsistent with voltages")
            if np.max(np.abs(q - self.q_flow[t]), initial=0.0) > tol * BASE_MVA:
                raise ValueError(f"period {t}: reactive flows inconsistent with voltages")
