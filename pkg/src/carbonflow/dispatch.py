"""Baseline energy management (EM) and carbon-aware energy management (CA-EM)
models, plus ex-post exact-carbon evaluation, comparison, and price
sensitivity.

EM maximizes demand utility minus generation, reserve, and storage costs.
CA-EM adds, per period, the compiled injection-to-emission network, the gated
storage-intensity networks chained across periods, and a blocked carbon cost
on each load's predicted emission rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import carbon
from .branchbound import solve_model
from .data import Scenario, feature_names
from .encoding import EncodeStats, encode_es_gate, encode_network
from .milp import (EQ, GE, INF, LE, MilpModel, ModelError, SolveResult,
                   add_blocked_cost, add_concave_pwl_utility, add_convex_pwl_cost)
from .network import (DispatchState, NetworkCase, PeriodVars,
                      add_acpf_constraints, eval_flows)
from .nets import SparseNet

log = logging.getLogger(__name__)

THETA_BOUND = 0.6  # rad, generous envelope for desk-scale cases


class StaleModelError(ValueError):
    """The trained networks were fitted on a different case."""


@dataclass(frozen=True)
class BlockedTariff:
    """Stepwise demand-side carbon price: nondecreasing block prices over
    emission-rate intervals."""

    prices: tuple[float, ...]   # $/tCO2
    caps: tuple[float, ...]     # tCO2/h per block
    dt_hours: float = 1.0

    def __post_init__(self):
        if len(self.prices) != len(self.caps) or not self.prices:
            raise ValueError("tariff needs matching, nonempty prices and caps")
        if any(p2 < p1 for p1, p2 in zip(self.prices, self.prices[1:])):
            raise ValueError("block prices must be nondecreasing")
        if any(c <= 0 for c in self.caps):
            raise ValueError("block caps must be positive")
        if any(p < 0 for p in self.prices):
            raise ValueError("block prices must be nonnegative")

    def scaled(self, factor: float) -> "BlockedTariff":
        if factor < 0:
            raise ValueError("tariff scale must be nonnegative")
        return BlockedTariff(tuple(p * factor for p in self.prices), self.caps,
                             self.dt_hours)

    def cost_of_rate(self, rate: float) -> float:
        """Closed-form blocked cost ($ per period) of an emission rate."""
        remaining = max(rate, 0.0)
        total = 0.0
        for price, cap in zip(self.prices, self.caps):
            take = min(remaining, cap)
            total += price * take
            remaining -= take
            if remaining <= 0:
                break
        if remaining > 1e-9:
            total += self.prices[-1] * remaining  # beyond the last block
        return total * self.dt_hours

    @property
    def total_cap(self) -> float:
        return sum(self.caps)


def paper_tariff(dt_hours: float = 1.0) -> BlockedTariff:
    """The reference blocked price: 40/60/80/100 $/tCO2 over 10/10/20/20 tCO2/h."""
    return BlockedTariff((40.0, 60.0, 80.0, 100.0), (10.0, 10.0, 20.0, 20.0), dt_hours)


@dataclass(frozen=True)
class BuildOptions:
    reserve_fraction: float = 0.05   # of scenario demand, per period
    dr_lower: float = 0.7            # demand-response lower bound multiplier
    terminal_soc: bool = True        # end-of-horizon energy >= initial
    q_gen_factor: float = 0.75       # generator reactive range as share of p_max
    utility_segments: int = 4
    cost_segments: int = 4


@dataclass
class NetsBundle:
    cef: SparseNet
    es_dis: SparseNet | None = None
    es_cha: SparseNet | None = None

    @property
    def case_hash(self) -> str | None:
        return self.cef.meta.get("case_hash")


@dataclass
class VarMap:
    periods: list[PeriodVars] = field(default_factory=list)
    r_up: list[list[int]] = field(default_factory=list)
    r_dn: list[list[int]] = field(default_factory=list)
    mu_cha: list[list[int]] = field(default_factory=list)
    mu_dis: list[list[int]] = field(default_factory=list)
    psi: list[list[int]] = field(default_factory=list)
    renew_avail: list[list[float]] = field(default_factory=list)
    load_ub: list[list[float]] = field(default_factory=list)
    r_pred: list[list[int]] = field(default_factory=list)      # CA-EM: per load
    carbon_cost: list[list[int]] = field(default_factory=list)  # CA-EM: per load
    e_es: list[list[int]] = field(default_factory=list)         # CA-EM: per storage
    features: list[list[int]] = field(default_factory=list)     # CA-EM: 2n per period
    encode_stats: EncodeStats = field(default_factory=EncodeStats)
    cef_relus: list[EncodeStats] = field(default_factory=list)       # per period
    es_dis_relus: list[list[EncodeStats]] = field(default_factory=list)  # [t][s]
    es_cha_relus: list[list[EncodeStats]] = field(default_factory=list)


def _demand_bounds(case, scenario, opts, d, t):
    ub = case.loads[d].profile[t] * scenario.load_factors[d]
    return opts.dr_lower * ub, ub


def _build_period_vars(model: MilpModel, case: NetworkCase, scenario: Scenario,
                       opts: BuildOptions, t: int) -> PeriodVars:
    v = [model.add_var(f"v_t{t}_b{i}", case.buses[i].v_min, case.buses[i].v_max)
         for i in range(case.n_bus)]
    theta = [model.add_var(f"th_t{t}_b{i}", -THETA_BOUND, THETA_BOUND)
             for i in range(case.n_bus)]
    p_flow = [model.add_var(f"pf_t{t}_k{k}", -br.flow_limit, br.flow_limit)
              for k, br in enumerate(case.branches)]
    q_flow = [model.add_var(f"qf_t{t}_k{k}", -2.0 * br.flow_limit, 2.0 * br.flow_limit)
              for k, br in enumerate(case.branches)]
    p_gen = [model.add_var(f"pg_t{t}_g{g}", gen.p_min, gen.p_max)
             for g, gen in enumerate(case.generators)]
    q_gen = [model.add_var(f"qg_t{t}_g{g}", -opts.q_gen_factor * gen.p_max,
                           opts.q_gen_factor * gen.p_max)
             for g, gen in enumerate(case.generators)]
    p_renew = [model.add_var(f"pw_t{t}_r{r}", 0.0, ren.available(t))
               for r, ren in enumerate(case.renewables)]
    p_load = []
    for d in range(len(case.loads)):
        lo, hi = _demand_bounds(case, scenario, opts, d, t)
        p_load.append(model.add_var(f"pd_t{t}_d{d}", lo, hi))
    p_cha = [model.add_var(f"pc_t{t}_s{s}", 0.0, sto.p_cha_max)
             for s, sto in enumerate(case.storages)]
    p_dis = [model.add_var(f"pdchg_t{t}_s{s}", 0.0, sto.p_dis_max)
             for s, sto in enumerate(case.storages)]
    return PeriodVars(v, theta, p_flow, q_flow, p_gen, q_gen, p_renew, p_load,
                      p_cha, p_dis)


def _build_common(case: NetworkCase, scenario: Scenario, opts: BuildOptions,
                  mu_exclusive_eq: bool, name: str):
    """Everything shared by EM and CA-EM; returns (model, varmap, obj, const)."""
    if len(scenario.load_factors) != len(case.loads):
        raise ValueError("scenario factor count does not match case loads")
    model = MilpModel(name)
    vm = VarMap()
    obj: dict[int, float] = {}
    obj_const = 0.0
    dt = case.dt

    def obj_add(idx, coef):
        obj[idx] = obj.get(idx, 0.0) + coef

    for t in range(case.horizon):
        pv = _build_period_vars(model, case, scenario, opts, t)
        vm.periods.append(pv)
        vm.renew_avail.append([ren.available(t) for ren in case.renewables])
        vm.load_ub.append([_demand_bounds(case, scenario, opts, d, t)[1]
                           for d in range(len(case.loads))])
        add_acpf_constraints(model, case, t, pv)

        # demand utility (concave PWL, chord envelope exact at breakpoints)
        for d, load in enumerate(case.loads):
            lo, hi = _demand_bounds(case, scenario, opts, d, t)
            if hi <= 1e-9:
                continue
            segs = opts.utility_segments
            pts = [hi * (k + 1) / segs for k in range(segs)]
            slopes = []
            prev_x, prev_u = 0.0, 0.0
            for x in pts:
                u = load.utility(x)
                slopes.append((u - prev_u) / (x - prev_x))
                prev_x, prev_u = x, u
            u_var = add_concave_pwl_utility(model, pv.p_load[d], pts[:-1], slopes,
                                            name=f"u_t{t}_d{d}")
            obj_add(u_var, dt)

        # generation cost (convex PWL on breakpoint samples)
        for g, gen in enumerate(case.generators):
            if gen.p_max - gen.p_min <= 1e-9:
                obj_const -= dt * gen.cost(gen.p_min)
                continue
            segs = opts.cost_segments
            xs = [gen.p_min + (gen.p_max - gen.p_min) * k / segs for k in range(segs + 1)]
            ys = [gen.cost(x) for x in xs]
            c_var = add_convex_pwl_cost(model, pv.p_gen[g], xs, ys, name=f"cg_t{t}_g{g}")
            obj_add(c_var, -dt)

        # reserves
        r_up, r_dn = [], []
        for g, gen in enumerate(case.generators):
            cap = gen.p_max - gen.p_min
            ru = model.add_var(f"ru_t{t}_g{g}", 0.0, cap)
            rd = model.add_var(f"rd_t{t}_g{g}", 0.0, cap)
            model.add_constr({pv.p_gen[g]: 1.0, ru: 1.0}, LE, gen.p_max,
                             name=f"res_hi_t{t}_g{g}")
            model.add_constr({pv.p_gen[g]: 1.0, rd: -1.0}, GE, gen.p_min,
                             name=f"res_lo_t{t}_g{g}")
            obj_add(ru, -dt * gen.reserve_cost)
            obj_add(rd, -dt * gen.reserve_cost)
            r_up.append(ru)
            r_dn.append(rd)
        vm.r_up.append(r_up)
        vm.r_dn.append(r_dn)
        req = opts.reserve_fraction * sum(
            case.loads[d].profile[t] * scenario.load_factors[d]
            for d in range(len(case.loads)))
        if case.generators:
            model.add_constr({j: 1.0 for j in r_up}, GE, req, name=f"res_up_t{t}")
            model.add_constr({j: 1.0 for j in r_dn}, GE, req, name=f"res_dn_t{t}")

        # ramping
        if t > 0:
            prev = vm.periods[t - 1]
            for g, gen in enumerate(case.generators):
                model.add_constr({pv.p_gen[g]: 1.0, prev.p_gen[g]: -1.0}, LE,
                                 gen.ramp_up, name=f"ramp_up_t{t}_g{g}")
                model.add_constr({prev.p_gen[g]: 1.0, pv.p_gen[g]: -1.0}, LE,
                                 gen.ramp_down, name=f"ramp_dn_t{t}_g{g}")

        # storage dynamics, mode exclusivity, throughput and leakage costs
        mu_c, mu_d, psis = [], [], []
        for s, sto in enumerate(case.storages):
            mc = model.add_binary(f"mu_cha_t{t}_s{s}")
            md = model.add_binary(f"mu_dis_t{t}_s{s}")
            psi = model.add_var(f"psi_t{t}_s{s}", sto.psi_min, sto.psi_max)
            model.add_constr({mc: 1.0, md: 1.0}, EQ if mu_exclusive_eq else LE,
                             1.0, name=f"mu_t{t}_s{s}")
            model.add_constr({pv.p_cha[s]: 1.0, mc: -sto.p_cha_max}, LE, 0.0,
                             name=f"cha_gate_t{t}_s{s}")
            model.add_constr({pv.p_dis[s]: 1.0, md: -sto.p_dis_max}, LE, 0.0,
                             name=f"dis_gate_t{t}_s{s}")
            keep = 1.0 - sto.leak_rate
            if t == 0:
                rhs = keep * sto.psi0
                coeffs = {psi: 1.0, pv.p_cha[s]: -sto.eta_ch * dt,
                          pv.p_dis[s]: dt / sto.eta_dis}
                model.add_constr(coeffs, EQ, rhs, name=f"soc_t{t}_s{s}")
                model.add_constr({pv.p_dis[s]: dt / sto.eta_dis}, LE,
                                 keep * sto.psi0 - sto.psi_min, name=f"dis_room_t{t}_s{s}")
                model.add_constr({pv.p_cha[s]: sto.eta_ch * dt}, LE,
                                 sto.psi_max - keep * sto.psi0, name=f"cha_room_t{t}_s{s}")
            else:
                prev_psi = vm.psi[t - 1][s]
                coeffs = {psi: 1.0, prev_psi: -keep,
                          pv.p_cha[s]: -sto.eta_ch * dt, pv.p_dis[s]: dt / sto.eta_dis}
                model.add_constr(coeffs, EQ, 0.0, name=f"soc_t{t}_s{s}")
                model.add_constr({pv.p_dis[s]: dt / sto.eta_dis, prev_psi: -keep},
                                 LE, -sto.psi_min, name=f"dis_room_t{t}_s{s}")
                model.add_constr({pv.p_cha[s]: sto.eta_ch * dt, prev_psi: keep},
                                 LE, sto.psi_max, name=f"cha_room_t{t}_s{s}")
            obj_add(pv.p_cha[s], -dt * sto.deg_price)
            obj_add(pv.p_dis[s], -dt * sto.deg_price)
            if sto.leak_rate > 0:
                obj_add(psi, -dt * sto.deg_price * sto.leak_rate)
            mu_c.append(mc)
            mu_d.append(md)
            psis.append(psi)
        vm.mu_cha.append(mu_c)
        vm.mu_dis.append(mu_d)
        vm.psi.append(psis)

    if opts.terminal_soc:
        for s, sto in enumerate(case.storages):
            model.add_constr({vm.psi[case.horizon - 1][s]: 1.0}, GE, sto.psi0,
                             name=f"soc_end_s{s}")
    return model, vm, obj, obj_const


def build_em(case: NetworkCase, scenario: Scenario,
             opts: BuildOptions | None = None) -> tuple[MilpModel, VarMap]:
    """Carbon-blind baseline scheduling model."""
    opts = opts or BuildOptions()
    model, vm, obj, const = _build_common(case, scenario, opts,
                                          mu_exclusive_eq=False, name="em")
    model.set_objective(obj, "max", const)
    return model, vm


def _injection_bounds(case: NetworkCase, scenario: Scenario, opts: BuildOptions,
                      t: int):
    n = case.n_bus
    lo = np.zeros(n)
    hi = np.zeros(n)
    dem_lo = np.zeros(n)
    dem_hi = np.zeros(n)
    for gen in case.generators:
        i = case.bus_index(gen.bus)
        lo[i] += gen.p_min
        hi[i] += gen.p_max
    for ren in case.renewables:
        hi[case.bus_index(ren.bus)] += ren.available(t)
    for s, sto in enumerate(case.storages):
        i = case.bus_index(sto.bus)
        lo[i] -= sto.p_cha_max
        hi[i] += sto.p_dis_max
    for d, load in enumerate(case.loads):
        i = case.bus_index(load.bus)
        dlo, dhi = _demand_bounds(case, scenario, opts, d, t)
        lo[i] -= dhi
        hi[i] -= dlo
        dem_lo[i] += dlo
        dem_hi[i] += dhi
    return lo, hi, dem_lo, dem_hi


def build_caem(case: NetworkCase, scenario: Scenario, nets: NetsBundle,
               tariff: BlockedTariff,
               opts: BuildOptions | None = None) -> tuple[MilpModel, VarMap]:
    """Carbon-aware model: EM plus compiled networks and blocked carbon costs.

    Refuses to assemble when the networks were trained on a different case
    (content-hash check).
    """
    opts = opts or BuildOptions()
    case_hash = case.content_hash()
    for tag, net in (("cef", nets.cef), ("es_dis", nets.es_dis), ("es_cha", nets.es_cha)):
        if net is not None and net.meta.get("case_hash") not in (None, case_hash):
            raise StaleModelError(f"{tag} network was trained on a different case")
    if case.storages and (nets.es_dis is None or nets.es_cha is None):
        raise ModelError("case has storage; storage-intensity networks required")
    n_loads = len(case.loads)
    n_sto = len(case.storages)
    if nets.cef.dims[0] != 2 * case.n_bus or nets.cef.dims[-1] != n_loads + n_sto:
        raise ModelError("carbon network shape does not match the case")

    model, vm, obj, const = _build_common(case, scenario, opts,
                                          mu_exclusive_eq=True, name="caem")
    dt = case.dt
    e_gate = 1.5 * case.max_gci if case.max_gci > 0 else 1.0
    # chained storage intensity; period -1 entries are fixed at e0
    prev_e: list[int] = []
    for s, sto in enumerate(case.storages):
        e0 = model.add_var(f"e_es_init_s{s}", sto.e0, sto.e0)
        prev_e.append(e0)
    prev_psi: list[int] = []
    for s, sto in enumerate(case.storages):
        psi0 = model.add_var(f"psi_init_s{s}", sto.psi0, sto.psi0)
        prev_psi.append(psi0)

    for t in range(case.horizon):
        pv = vm.periods[t]
        inj_lo, inj_hi, dem_lo, dem_hi = _injection_bounds(case, scenario, opts, t)
        feat_vars: list[int] = []
        for i in range(case.n_bus):
            fv = model.add_var(f"inj_t{t}_b{i}", inj_lo[i], inj_hi[i])
            coeffs = {fv: 1.0}
            for g, gen in enumerate(case.generators):
                if case.bus_index(gen.bus) == i:
                    coeffs[pv.p_gen[g]] = coeffs.get(pv.p_gen[g], 0.0) - 1.0
            for r, ren in enumerate(case.renewables):
                if case.bus_index(ren.bus) == i:
                    coeffs[pv.p_renew[r]] = coeffs.get(pv.p_renew[r], 0.0) - 1.0
            for s, sto in enumerate(case.storages):
                if case.bus_index(sto.bus) == i:
                    coeffs[pv.p_dis[s]] = coeffs.get(pv.p_dis[s], 0.0) - 1.0
                    coeffs[pv.p_cha[s]] = coeffs.get(pv.p_cha[s], 0.0) + 1.0
            for d, load in enumerate(case.loads):
                if case.bus_index(load.bus) == i:
                    coeffs[pv.p_load[d]] = coeffs.get(pv.p_load[d], 0.0) + 1.0
            model.add_constr(coeffs, EQ, 0.0, name=f"feat_inj_t{t}_b{i}")
            feat_vars.append(fv)
        for i in range(case.n_bus):
            fv = model.add_var(f"dem_t{t}_b{i}", dem_lo[i], dem_hi[i])
            coeffs = {fv: 1.0}
            for d, load in enumerate(case.loads):
                if case.bus_index(load.bus) == i:
                    coeffs[pv.p_load[d]] = coeffs.get(pv.p_load[d], 0.0) - 1.0
            model.add_constr(coeffs, EQ, 0.0, name=f"feat_dem_t{t}_b{i}")
            feat_vars.append(fv)

        vm.features.append(list(feat_vars))
        outputs, stats = encode_network(model, nets.cef, feat_vars, prefix=f"cef_t{t}")
        vm.encode_stats.merge(stats)
        vm.cef_relus.append(stats)
        r_pred = outputs[:n_loads]
        nci_pred = outputs[n_loads:]
        vm.r_pred.append(list(r_pred))

        cost_vars = []
        for d in range(n_loads):
            cost_var, _ = add_blocked_cost(model, r_pred[d], tariff,
                                           name=f"cb_t{t}_d{d}")
            obj[cost_var] = obj.get(cost_var, 0.0) - 1.0
            cost_vars.append(cost_var)
        vm.carbon_cost.append(cost_vars)

        e_now_vars = []
        dis_stats, cha_stats = [], []
        for s, sto in enumerate(case.storages):
            psi_now = vm.psi[t][s]
            e_node = nci_pred[s]
            dis_in = [psi_now, prev_psi[s], pv.p_dis[s], prev_e[s], e_node]
            cha_in = [psi_now, prev_psi[s], pv.p_cha[s], prev_e[s], e_node]
            f_dis, st1 = encode_network(model, nets.es_dis, dis_in,
                                        prefix=f"esd_t{t}_s{s}")
            f_cha, st2 = encode_network(model, nets.es_cha, cha_in,
                                        prefix=f"esc_t{t}_s{s}")
            vm.encode_stats.merge(st1)
            vm.encode_stats.merge(st2)
            dis_stats.append(st1)
            cha_stats.append(st2)
            e_es = encode_es_gate(model, f_dis[0], f_cha[0], vm.mu_dis[t][s],
                                  vm.mu_cha[t][s], -e_gate, e_gate,
                                  prefix=f"esg_t{t}_s{s}")
            e_now_vars.append(e_es)
        vm.es_dis_relus.append(dis_stats)
        vm.es_cha_relus.append(cha_stats)
        vm.e_es.append(e_now_vars)
        prev_e = e_now_vars
        prev_psi = list(vm.psi[t])

    model.set_objective(obj, "max", const)
    return model, vm


# ----------------------------------------------------------------------
# solution extraction and evaluation
# ----------------------------------------------------------------------

def extract_state(case: NetworkCase, vm: VarMap, x: np.ndarray) -> DispatchState:
    T = case.horizon
    nG, nR = len(case.generators), len(case.renewables)
    nD, nS, nN, nK = len(case.loads), len(case.storages), case.n_bus, len(case.branches)
    state = DispatchState(
        p_gen=np.zeros((T, nG)), q_gen=np.zeros((T, nG)),
        p_renew=np.zeros((T, nR)), curtailed=np.zeros((T, nR)),
        p_load=np.zeros((T, nD)), p_cha=np.zeros((T, nS)), p_dis=np.zeros((T, nS)),
        mu_cha=np.zeros((T, nS)), mu_dis=np.zeros((T, nS)), psi=np.zeros((T, nS)),
        v=np.zeros((T, nN)), theta=np.zeros((T, nN)),
        p_flow=np.zeros((T, nK)), q_flow=np.zeros((T, nK)),
        r_up=np.zeros((T, nG)), r_dn=np.zeros((T, nG)))
    for t in range(T):
        pv = vm.periods[t]
        state.p_gen[t] = [x[j] for j in pv.p_gen]
        state.q_gen[t] = [x[j] for j in pv.q_gen]
        state.p_renew[t] = [x[j] for j in pv.p_renew]
        state.curtailed[t] = [vm.renew_avail[t][r] - x[pv.p_renew[r]] for r in range(nR)]
        state.p_load[t] = [x[j] for j in pv.p_load]
        state.p_cha[t] = [max(x[j], 0.0) for j in pv.p_cha]
        state.p_dis[t] = [max(x[j], 0.0) for j in pv.p_dis]
        state.mu_cha[t] = [round(x[j]) for j in vm.mu_cha[t]]
        state.mu_dis[t] = [round(x[j]) for j in vm.mu_dis[t]]
        state.psi[t] = [x[j] for j in vm.psi[t]]
        state.v[t] = [x[j] for j in pv.v]
        state.theta[t] = [x[j] for j in pv.theta]
        state.r_up[t] = [x[j] for j in vm.r_up[t]]
        state.r_dn[t] = [x[j] for j in vm.r_dn[t]]
        # zero out solver dust so the carbon ledger sees clean modes
        state.p_cha[t][state.p_cha[t] < 1e-9] = 0.0
        state.p_dis[t][state.p_dis[t] < 1e-9] = 0.0
        p, q = eval_flows(case, state.v[t], state.theta[t])
        state.p_flow[t] = p
        state.q_flow[t] = q
    return state


@dataclass
class ScheduleOutcome:
    mode: str
    welfare: float                  # utility - gen - reserve - storage (- own carbon cost)
    welfare_with_carbon: float      # welfare minus ex-post blocked cost of exact emissions
    utility: float
    generation_cost: float
    reserve_cost: float
    storage_cost: float
    carbon_cost: float              # in-model blocked cost (0 for EM)
    carbon_cost_expost: float       # blocked cost of exact emissions
    emission_exact: float           # tCO2 over the horizon
    emission_predicted: float       # tCO2, NN in-model (nan for EM)
    load_energy: float              # MWh
    r_l: np.ndarray                 # (T, n_bus) exact tCO2/h
    objective: float
    solve: SolveResult
    state: DispatchState
    n_binaries: int = 0
    nnz: int = 0


def evaluate(case: NetworkCase, scenario: Scenario, vm: VarMap, res: SolveResult,
             tariff: BlockedTariff, mode: str = "em",
             model: MilpModel | None = None) -> ScheduleOutcome:
    """Reconstruct the schedule and account it with the exact carbon engine."""
    if res.status not in ("optimal", "gap-limit", "node-limit") or res.x is None:
        raise ModelError(f"cannot evaluate a solve with status {res.status}")
    x = res.x
    state = extract_state(case, vm, x)
    flows = carbon.cef_for_dispatch(case, state)
    dt = case.dt
    T = case.horizon

    utility = sum(case.loads[d].utility(state.p_load[t, d]) * dt
                  for t in range(T) for d in range(len(case.loads)))
    gen_cost = sum(case.generators[g].cost(state.p_gen[t, g]) * dt
                   for t in range(T) for g in range(len(case.generators)))
    res_cost = sum(case.generators[g].reserve_cost
                   * (state.r_up[t, g] + state.r_dn[t, g]) * dt
                   for t in range(T) for g in range(len(case.generators)))
    sto_cost = 0.0
    for t in range(T):
        for s, sto in enumerate(case.storages):
            sto_cost += sto.deg_price * (state.p_cha[t, s] + state.p_dis[t, s]) * dt
            sto_cost += sto.deg_price * sto.leak_rate * state.psi[t, s] * dt

    r_l = np.array([flows[t].r_l for t in range(T)])
    emission_exact = float(r_l.sum() * dt)
    load_energy = float(state.p_load.sum() * dt)

    carbon_cost = 0.0
    emission_predicted = math.nan
    if mode == "caem":
        carbon_cost = sum(x[j] for t in range(T) for j in vm.carbon_cost[t])
        emission_predicted = sum(x[j] for t in range(T) for j in vm.r_pred[t]) * dt
    expost = 0.0
    for t in range(T):
        for i in case.load_buses:
            expost += tariff.cost_of_rate(float(r_l[t, i]))

    welfare = utility - gen_cost - res_cost - sto_cost - carbon_cost
    return ScheduleOutcome(
        mode=mode, welfare=welfare, welfare_with_carbon=welfare + carbon_cost - expost,
        utility=utility, generation_cost=gen_cost, reserve_cost=res_cost,
        storage_cost=sto_cost, carbon_cost=carbon_cost, carbon_cost_expost=expost,
        emission_exact=emission_exact, emission_predicted=emission_predicted,
        load_energy=load_energy, r_l=r_l, objective=res.objective, solve=res,
        state=state,
        n_binaries=model.n_binaries if model is not None else 0,
        nnz=model.nnz if model is not None else 0)


def compare(em: ScheduleOutcome, caem: ScheduleOutcome) -> dict[str, float]:
    """Percentage deltas (CA-EM vs EM), negative = reduction."""
    def pct(new, old):
        if old == 0:
            return 0.0 if new == old else math.inf
        return 100.0 * (new - old) / abs(old)

    return {
        "welfare_pct": pct(caem.welfare, em.welfare),
        "welfare_with_carbon_pct": pct(caem.welfare_with_carbon, em.welfare_with_carbon),
        "utility_pct": pct(caem.utility, em.utility),
        "emission_pct": pct(caem.emission_exact, em.emission_exact),
        "load_pct": pct(caem.load_energy, em.load_energy),
    }


def caem_start_fixes(case: NetworkCase, nets: NetsBundle, vm: VarMap,
                     features: np.ndarray, p_cha: np.ndarray,
                     p_dis: np.ndarray) -> dict[int, int]:
    """Binary assignments that complete a dispatch into a feasible CA-EM point.

    Traces every compiled network at the given per-period feature values and
    fixes each ReLU binary to the sign of its forced pre-activation; storage
    mode binaries follow the dispatch (idle counts as charging at zero power).
    Feeding these to the solver yields an incumbent after one LP.
    """
    from .nets import forward_trace

    fixes: dict[int, int] = {}
    n_loads = len(case.loads)
    e_prev = np.array([s.e0 for s in case.storages], dtype=float)
    psi_prev = np.array([s.psi0 for s in case.storages], dtype=float)
    for t in range(case.horizon):
        pre, y_norm = forward_trace(nets.cef, nets.cef.normalize_x(features[t]))
        for (l, i), t_var in vm.cef_relus[t].t_vars.items():
            fixes[t_var] = 1 if pre[l][i] > 0.0 else 0
        y_phys = nets.cef.denormalize_y(y_norm)
        e_now = np.empty(len(case.storages))
        for s, sto in enumerate(case.storages):
            charging = p_dis[t, s] <= 1e-9  # idle counts as charging
            fixes[vm.mu_cha[t][s]] = 1 if charging else 0
            fixes[vm.mu_dis[t][s]] = 0 if charging else 1
            cha = p_cha[t, s] if charging else 0.0
            dis = 0.0 if charging else p_dis[t, s]
            keep = 1.0 - sto.leak_rate
            psi_now = keep * psi_prev[s] + sto.eta_ch * cha * case.dt \
                - (dis / sto.eta_dis) * case.dt
            e_node = float(y_phys[n_loads + s])
            dis_x = np.array([psi_now, psi_prev[s], dis, e_prev[s], e_node])
            cha_x = np.array([psi_now, psi_prev[s], cha, e_prev[s], e_node])
            pre_d, out_d = forward_trace(nets.es_dis, nets.es_dis.normalize_x(dis_x))
            pre_c, out_c = forward_trace(nets.es_cha, nets.es_cha.normalize_x(cha_x))
            for (l, i), t_var in vm.es_dis_relus[t][s].t_vars.items():
                fixes[t_var] = 1 if pre_d[l][i] > 0.0 else 0
            for (l, i), t_var in vm.es_cha_relus[t][s].t_vars.items():
                fixes[t_var] = 1 if pre_c[l][i] > 0.0 else 0
            gated = nets.es_cha.denormalize_y(out_c) if charging \
                else nets.es_dis.denormalize_y(out_d)
            e_now[s] = float(gated[0])
            psi_prev[s] = psi_now
        e_prev = e_now
    return fixes


def solve_and_evaluate(case, scenario, model, vm, tariff, mode, **solver_opts):
    res = solve_model(model, **solver_opts)
    if res.status not in ("optimal", "gap-limit", "node-limit") or res.x is None:
        return None, res
    return evaluate(case, scenario, vm, res, tariff, mode, model=model), res


def _trace_fixes_at(case, nets, vm, x):
    T = case.horizon
    nS = len(case.storages)
    feats = np.array([[x[j] for j in vm.features[t]] for t in range(T)])
    pc = np.array([[x[vm.periods[t].p_cha[s]] for s in range(nS)] for t in range(T)])
    pd = np.array([[x[vm.periods[t].p_dis[s]] for s in range(nS)] for t in range(T)])
    return caem_start_fixes(case, nets, vm, feats, pc, pd)


def _trimmed_probe(case, vm, x, floor_frac: float):
    """Variant of a solution vector with every load at its response floor;
    only used to seed an activation-pattern trace."""
    x2 = np.array(x, dtype=float)
    for t in range(case.horizon):
        pv = vm.periods[t]
        for d, load in enumerate(case.loads):
            j = pv.p_load[d]
            cut = (1.0 - floor_frac) * x2[j]
            # trimming demand raises net injection at the load bus
            i_feat = vm.features[t][case.bus_index(load.bus)]
            d_feat = vm.features[t][case.n_bus + case.bus_index(load.bus)]
            x2[i_feat] += cut
            x2[d_feat] -= cut
            x2[j] -= cut
    return x2


def solve_caem(case: NetworkCase, scenario: Scenario, nets: NetsBundle,
               tariff: BlockedTariff, opts: BuildOptions | None = None,
               start: tuple | None = None, descent_rounds: int = 4,
               seed_fixes: list[dict] | None = None, **solver_opts):
    """Build and solve CA-EM, seeding the search with pattern-descent
    incumbents.

    Descent alternates two steps: trace the networks at the current dispatch
    to fix an activation pattern, then solve the pattern-fixed LP to get the
    best dispatch for that pattern.  Multiple starting patterns are explored
    (the relaxed dispatch, a demand-trimmed probe, plus any ``seed_fixes``
    from neighboring solves); the best seeds branch-and-bound.
    """
    from .simplex import lp_solve, solve_std, standardize

    opts = opts or BuildOptions()
    model, vm = build_caem(case, scenario, nets, tariff, opts)
    relax = lp_solve(model, start=start)
    fixes = None
    warm = start
    if relax.status == "optimal":
        warm = relax.warm
        std = standardize(model)
        best_obj = -math.inf
        seen: set = set()
        starts: list[dict] = [
            _trace_fixes_at(case, nets, vm, relax.x),
            _trace_fixes_at(case, nets, vm,
                            _trimmed_probe(case, vm, relax.x, opts.dr_lower))]
        if seed_fixes:
            starts.extend(seed_fixes)
        for fixes_k in starts:
            warm_k = relax.warm
            for _ in range(max(1, descent_rounds)):
                key = tuple(sorted(fixes_k.items()))
                if key in seen:
                    break
                seen.add(key)
                lb = std.lb.copy()
                ub = std.ub.copy()
                for j, v in fixes_k.items():
                    if v:
                        lb[j] = 1.0
                    else:
                        ub[j] = 0.0
                try:
                    sol = solve_std(std, lb, ub, start=warm_k)
                except Exception:
                    break
                if sol.status != "optimal":
                    break
                obj = -sol.obj if std.maximize else sol.obj
                if obj > best_obj:
                    best_obj = obj
                    fixes = fixes_k
                warm_k = (sol.statuses, sol.basis)
                fixes_k = _trace_fixes_at(case, nets, vm, sol.x)
    out, res = solve_and_evaluate(case, scenario, model, vm, tariff, "caem",
                                  start=warm, start_fixes=fixes, **solver_opts)
    return out, res, model, vm


def price_sensitivity(case: NetworkCase, scenario: Scenario, nets: NetsBundle,
                      base_tariff: BlockedTariff, scales,
                      opts: BuildOptions | None = None,
                      **solver_opts) -> list[dict]:
    """Solve CA-EM per scaled tariff; per-point failures are recorded and the
    curve continues.

    Adjacent points share warm bases and activation patterns (all models have
    identical structure), which keeps the curve consistent.
    """
    from .simplex import solve_std, standardize

    scales = list(scales)
    if any(s2 < s1 for s1, s2 in zip(scales, scales[1:])):
        raise ValueError("scale grid must be sorted ascending")
    em_model, em_vm = build_em(case, scenario, opts)
    em_out, em_res = solve_and_evaluate(case, scenario, em_model, em_vm,
                                        base_tariff, "em", **solver_opts)
    if em_out is None:
        raise ModelError("baseline EM is infeasible; no reference point")

    # pass 1: per-point search, pooling every activation pattern discovered
    pool: dict[tuple, dict] = {}
    raw: list[dict] = []
    chain: list[dict] = []
    warm = None
    for scale in scales:
        tariff = base_tariff.scaled(scale)
        try:
            out, res, model, vm = solve_caem(case, scenario, nets, tariff, opts,
                                             start=warm, seed_fixes=chain,
                                             **solver_opts)
        except (ModelError, ValueError) as exc:
            log.warning("sensitivity point %.3g failed: %s", scale, exc)
            raw.append({"scale": scale, "status": "error"})
            continue
        if out is None:
            raw.append({"scale": scale, "status": res.status})
            continue
        warm = res.warm or warm
        pattern = _trace_fixes_at(case, nets, vm, res.x)
        pool.setdefault(tuple(sorted(pattern.items())), pattern)
        chain = [pattern] + chain[:1]
        raw.append({"scale": scale, "status": "ok", "solve_status": res.status,
                    "gap": res.gap})

    # pass 2: evaluate every point against the shared pattern pool so the
    # reported curve is a best-response over one candidate set per point
    points: list[dict] = []
    for k, scale in enumerate(scales):
        if raw[k]["status"] != "ok":
            points.append(raw[k])
            continue
        tariff = base_tariff.scaled(scale)
        model, vm = build_caem(case, scenario, nets, tariff, opts)
        std = standardize(model)
        best = None
        warm_k = None
        for pattern in pool.values():
            lb = std.lb.copy()
            ub = std.ub.copy()
            for j, v in pattern.items():
                if v:
                    lb[j] = 1.0
                else:
                    ub[j] = 0.0
            try:
                sol = solve_std(std, lb, ub, start=warm_k)
            except Exception:
                continue
            if sol.status != "optimal":
                continue
            warm_k = (sol.statuses, sol.basis)
            obj = -sol.obj + std.obj_const if std.maximize else sol.obj + std.obj_const
            if best is None or obj > best[0]:
                best = (obj, sol.x[:model.n_vars].copy())
        if best is None:
            points.append({"scale": scale, "status": "error"})
            continue
        res = SolveResult(raw[k]["solve_status"], best[1], best[0], raw[k]["gap"])
        out = evaluate(case, scenario, vm, res, tariff, "caem", model=model)
        points.append({
            "scale": scale,
            "status": "ok",
            "solve_status": raw[k]["solve_status"],
            "gap": raw[k]["gap"],
            "emission": out.emission_exact,
            "load_energy": out.load_energy,
            "demand_reduction": em_out.load_energy - out.load_energy,
            "welfare": out.welfare,
        })
    return points
